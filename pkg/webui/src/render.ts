/** DOM rendering for the result area. Builds nodes with textContent so FAQ
 * text is never interpreted as markup. */

import type { FaqMatch } from "./api.js";
import type { QueryState } from "./state.js";

/** Cut between the qualitative bands. Returned matches already cleared the
 * service's decision threshold, so "medium" is the floor, not "low". */
export const HIGH_SCORE = 0.75;

export function scoreBand(score: number): "high" | "medium" {
  return score >= HIGH_SCORE ? "high" : "medium";
}

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  className: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  node.className = className;
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

export function renderCard(doc: Document, match: FaqMatch): HTMLElement {
  const card = el(doc, "article", "card");

  const head = el(doc, "div", "card-head");
  head.appendChild(el(doc, "h3", "card-question", match.question));
  const band = scoreBand(match.score);
  const badge = el(doc, "span", `badge badge-${band}`, `${band} match`);
  badge.title = `score ${match.score.toFixed(3)}`;
  head.appendChild(badge);
  card.appendChild(head);

  card.appendChild(el(doc, "p", "card-answer", match.answer));

  const meta = el(doc, "footer", "card-meta");
  meta.appendChild(el(doc, "span", "card-source", match.source));
  const updated = el(doc, "time", "card-updated", `updated ${match.last_updated}`);
  updated.setAttribute("datetime", match.last_updated);
  meta.appendChild(updated);
  card.appendChild(meta);

  return card;
}

export function renderResults(root: HTMLElement, state: QueryState): void {
  const doc = root.ownerDocument;
  root.replaceChildren();

  switch (state.status) {
    case "idle":
      return;

    case "loading": {
      const note = el(doc, "p", "loading", "Searching…");
      note.setAttribute("role", "status");
      root.appendChild(note);
      return;
    }

    case "results": {
      const list = el(doc, "div", "card-list");
      for (const match of state.matches) {
        list.appendChild(renderCard(doc, match));
      }
      root.appendChild(list);
      return;
    }

    case "empty": {
      const box = el(doc, "div", "empty-state");
      box.appendChild(
        el(
          doc,
          "p",
          "empty-message",
          "No confident match was found for your question.",
        ),
      );
      const escalate = el(
        doc,
        "a",
        "escalate-link",
        "Chat with a medical professional",
      );
      escalate.setAttribute("href", "/chat");
      box.appendChild(escalate);
      root.appendChild(box);
      return;
    }

    case "error": {
      if (state.error === null || state.error.kind === "validation") {
        // validation messages render at the input, not here
        return;
      }
      const banner = el(doc, "div", "error-banner");
      banner.setAttribute("role", "alert");
      banner.appendChild(el(doc, "p", "error-message", state.error.message));
      const retry = el(doc, "button", "retry", "Retry");
      retry.type = "button";
      banner.appendChild(retry);
      root.appendChild(banner);
      return;
    }
  }
}

/** Inline message slot next to the input; hidden when there is nothing to say. */
export function renderValidation(slot: HTMLElement, state: QueryState): void {
  if (state.status === "error" && state.error?.kind === "validation") {
    slot.textContent = state.error.message;
    slot.hidden = false;
  } else {
    slot.textContent = "";
    slot.hidden = true;
  }
}
