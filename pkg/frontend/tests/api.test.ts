import { describe, expect, it, vi } from "vitest";

import {
  ApiClient,
  ApiError,
  ConflictError,
  KEY_TO_CHOICE,
  type PendingPair,
} from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

const PAIR: PendingPair = {
  pair_id: "session-1/pair-0",
  trace_a: { version: 1, env_id: "point_mass", frames: [{ x: 0, y: 0 }], goal: { x: 1, y: 1 }, bounds: 2 },
  trace_b: { version: 1, env_id: "point_mass", frames: [{ x: 0.5, y: 0 }], goal: { x: 1, y: 1 }, bounds: 2 },
};

describe("ApiClient", () => {
  it("fetches the latest session summary", async () => {
    const fetchFn = vi.fn(async () =>
      jsonResponse({ status: "active", session_id: "session-1", pending: 5, total: 5 }),
    );
    const client = new ApiClient("", fetchFn as unknown as typeof fetch);
    const summary = await client.latestSession();
    expect(summary.session_id).toBe("session-1");
    expect(fetchFn).toHaveBeenCalledWith("/api/session");
  });

  it("unwraps the pending pair list", async () => {
    const fetchFn = vi.fn(async () => jsonResponse({ pending: [PAIR] }));
    const client = new ApiClient("", fetchFn as unknown as typeof fetch);
    const pending = await client.pending("session-1");
    expect(pending).toHaveLength(1);
    expect(pending[0].pair_id).toBe("session-1/pair-0");
    expect(fetchFn).toHaveBeenCalledWith("/api/session/session-1/pending");
  });

  it("posts labels with the documented body shape", async () => {
    const fetchFn = vi.fn(async () => jsonResponse({ ok: true, pending: 4 }));
    const client = new ApiClient("", fetchFn as unknown as typeof fetch);
    await client.submitLabel("session-1", "session-1/pair-0", "first");
    const [url, init] = fetchFn.mock.calls[0] as [string, RequestInit];
    expect(url).toBe("/api/session/session-1/label");
    expect(init.method).toBe("POST");
    expect(JSON.parse(init.body as string)).toEqual({
      pair_id: "session-1/pair-0",
      choice: "first",
    });
  });

  it("raises ConflictError on 409 so the UI can skip forward", async () => {
    const fetchFn = vi.fn(async () => jsonResponse({ detail: "dup" }, 409));
    const client = new ApiClient("", fetchFn as unknown as typeof fetch);
    await expect(
      client.submitLabel("session-1", "session-1/pair-0", "second"),
    ).rejects.toBeInstanceOf(ConflictError);
  });

  it("raises ApiError with the status for other failures", async () => {
    const fetchFn = vi.fn(async () => jsonResponse({ detail: "bad" }, 422));
    const client = new ApiClient("", fetchFn as unknown as typeof fetch);
    const err = await client
      .submitLabel("session-1", "session-1/pair-0", "equal")
      .catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(422);
  });
});

describe("keyboard mapping", () => {
  it("maps 1/2/E/S to first/second/equal/skip", () => {
    expect(KEY_TO_CHOICE["1"]).toBe("first");
    expect(KEY_TO_CHOICE["2"]).toBe("second");
    expect(KEY_TO_CHOICE["e"]).toBe("equal");
    expect(KEY_TO_CHOICE["E"]).toBe("equal");
    expect(KEY_TO_CHOICE["s"]).toBe("skip");
    expect(KEY_TO_CHOICE["S"]).toBe("skip");
  });
});
