/** Wires the form, store, and renderer together on one page. */

import { ApiError, matchQuestion, checkHealth } from "./api.js";
import type { Health, MatchResponse } from "./api.js";
import { QueryStore } from "./state.js";
import { renderResults, renderValidation } from "./render.js";

export interface MatchApi {
  matchQuestion(question: string): Promise<MatchResponse>;
  checkHealth(): Promise<Health>;
}

export interface AppHandle {
  store: QueryStore;
  submit(text: string): Promise<void>;
  healthReady: Promise<void>;
}

function mustFind<T extends HTMLElement>(doc: Document, id: string): T {
  const node = doc.getElementById(id);
  if (node === null) {
    throw new Error(`missing page element #${id}`);
  }
  return node as T;
}

export function initApp(
  doc: Document,
  api: MatchApi = { matchQuestion, checkHealth },
): AppHandle {
  const form = mustFind<HTMLFormElement>(doc, "ask-form");
  const input = mustFind<HTMLInputElement>(doc, "question");
  const button = mustFind<HTMLButtonElement>(doc, "submit");
  const validation = mustFind<HTMLElement>(doc, "validation");
  const results = mustFind<HTMLElement>(doc, "results");
  const statusLine = mustFind<HTMLElement>(doc, "service-status");

  const store = new QueryStore();
  store.subscribe((state) => {
    renderResults(results, state);
    renderValidation(validation, state);
  });

  async function submit(text: string): Promise<void> {
    const ticket = store.beginSubmit(text);
    try {
      const response = await api.matchQuestion(text);
      store.resolve(ticket, response);
    } catch (err) {
      if (err instanceof ApiError && err.status === 400) {
        store.reject(ticket, { kind: "validation", message: err.message });
      } else {
        const message = err instanceof Error ? err.message : String(err);
        store.reject(ticket, { kind: "request", message });
      }
    }
  }

  input.addEventListener("input", () => {
    button.disabled = input.value.trim() === "";
  });

  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const text = input.value.trim();
    if (text === "") {
      return;
    }
    void submit(text);
  });

  // retry lives inside the re-rendered banner, so delegate from the container
  results.addEventListener("click", (event) => {
    const target = event.target as HTMLElement | null;
    if (target !== null && target.classList.contains("retry")) {
      const question = store.getState().question;
      if (question !== "") {
        void submit(question);
      }
    }
  });

  const healthReady = api
    .checkHealth()
    .then((health) => {
      statusLine.textContent =
        `${health.faq_count} FAQs loaded · model ${health.model_version}`;
      statusLine.hidden = false;
    })
    .catch(() => {
      statusLine.textContent = "Service unreachable";
      statusLine.hidden = false;
    });

  return { store, submit, healthReady };
}
