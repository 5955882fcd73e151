/** Typed client for the match service HTTP endpoints. */

export interface FaqMatch {
  question: string;
  answer: string;
  source: string;
  last_updated: string;
  score: number;
}

export interface MatchResponse {
  matches: FaqMatch[];
  elapsed_ms: number;
}

export interface Health {
  status: string;
  faq_count: number;
  model_version: string;
}

export class ApiError extends Error {
  readonly status: number;

  constructor(status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
    this.status = status;
  }
}

/** Error responses carry {"detail": string}; anything else gets a status line. */
async function errorDetail(res: Response): Promise<string> {
  try {
    const body: unknown = await res.json();
    if (
      typeof body === "object" &&
      body !== null &&
      typeof (body as { detail?: unknown }).detail === "string"
    ) {
      return (body as { detail: string }).detail;
    }
  } catch {
    // body was not JSON; fall through
  }
  return `request failed with status ${res.status}`;
}

export async function matchQuestion(
  question: string,
  baseUrl = "",
): Promise<MatchResponse> {
  const res = await fetch(`${baseUrl}/v1/match`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ question }),
  });
  if (!res.ok) {
    throw new ApiError(res.status, await errorDetail(res));
  }
  return (await res.json()) as MatchResponse;
}

export async function checkHealth(baseUrl = ""): Promise<Health> {
  const res = await fetch(`${baseUrl}/v1/healthz`);
  if (!res.ok) {
    throw new ApiError(res.status, await errorDetail(res));
  }
  return (await res.json()) as Health;
}
