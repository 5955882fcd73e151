/** Query lifecycle state, kept outside the DOM so it can be tested directly. */

import type { FaqMatch, MatchResponse } from "./api.js";

export type Status = "idle" | "loading" | "results" | "empty" | "error";

export interface QueryError {
  /** "validation" renders inline at the input; "request" gets the retry banner. */
  kind: "validation" | "request";
  message: string;
}

export interface QueryState {
  question: string;
  status: Status;
  matches: FaqMatch[];
  error: QueryError | null;
}

export type Listener = (state: QueryState) => void;

const INITIAL: QueryState = {
  question: "",
  status: "idle",
  matches: [],
  error: null,
};

/**
 * Holds the state for the single query box. Each submission takes a ticket
 * from a monotonic counter; a response may only land if it presents the
 * newest ticket, so a slow earlier request can never overwrite a later one.
 */
export class QueryStore {
  private seq = 0;
  private state: QueryState = INITIAL;
  private listeners: Listener[] = [];

  getState(): QueryState {
    return this.state;
  }

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  /** Begin a submission and return the ticket its response must present. */
  beginSubmit(question: string): number {
    this.seq += 1;
    this.setState({ question, status: "loading", matches: [], error: null });
    return this.seq;
  }

  /** Apply a successful response. Returns false if the ticket is stale. */
  resolve(ticket: number, response: MatchResponse): boolean {
    if (ticket !== this.seq) {
      return false;
    }
    this.setState({
      ...this.state,
      status: response.matches.length === 0 ? "empty" : "results",
      matches: response.matches,
      error: null,
    });
    return true;
  }

  /** Apply a failed response. Returns false if the ticket is stale. */
  reject(ticket: number, error: QueryError): boolean {
    if (ticket !== this.seq) {
      return false;
    }
    this.setState({ ...this.state, status: "error", matches: [], error });
    return true;
  }

  private setState(next: QueryState): void {
    this.state = next;
    for (const fn of this.listeners) {
      fn(next);
    }
  }
}
