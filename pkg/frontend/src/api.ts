// Typed client for the labelling service JSON API (version 1).

export interface Frame {
  x: number;
  y: number;
}

export interface Trace {
  version: number;
  env_id: string;
  frames: Frame[];
  goal: Frame;
  bounds: number;
}

export interface PendingPair {
  pair_id: string;
  trace_a: Trace;
  trace_b: Trace;
}

export interface SessionSummary {
  status: "idle" | "active" | "complete";
  session_id: string | null;
  pending: number;
  total?: number;
  experiment_step?: number;
}

export interface SessionState {
  session_id: string;
  pending: number;
  completed: boolean;
  labels_collected: number;
  experiment_step: number;
}

export type LabelChoice = "first" | "second" | "equal" | "skip";

export class ConflictError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ConflictError";
  }
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: typeof fetch = fetch.bind(globalThis),
  ) {}

  private async get<T>(path: string): Promise<T> {
    const res = await this.fetchFn(this.baseUrl + path);
    if (!res.ok) {
      throw new ApiError(res.status, `GET ${path} failed with ${res.status}`);
    }
    return (await res.json()) as T;
  }

  latestSession(): Promise<SessionSummary> {
    return this.get<SessionSummary>("/api/session");
  }

  async pending(sessionId: string): Promise<PendingPair[]> {
    const body = await this.get<{ pending: PendingPair[] }>(
      `/api/session/${sessionId}/pending`,
    );
    return body.pending;
  }

  sessionState(sessionId: string): Promise<SessionState> {
    return this.get<SessionState>(`/api/session/${sessionId}/state`);
  }

  async submitLabel(
    sessionId: string,
    pairId: string,
    choice: LabelChoice,
  ): Promise<void> {
    const res = await this.fetchFn(`${this.baseUrl}/api/session/${sessionId}/label`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ pair_id: pairId, choice }),
    });
    if (res.status === 409) {
      throw new ConflictError(`pair ${pairId} already labelled`);
    }
    if (!res.ok) {
      throw new ApiError(res.status, `label submission failed with ${res.status}`);
    }
  }
}

// Keyboard shortcuts: 1/2 prefer a side, E equal, S skip.
export const KEY_TO_CHOICE: Record<string, LabelChoice> = {
  "1": "first",
  "2": "second",
  e: "equal",
  E: "equal",
  s: "skip",
  S: "skip",
};
