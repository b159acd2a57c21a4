import { describe, expect, it } from "vitest";

import { FRAME_MS, PlaybackClock, toCanvas } from "../src/playback.js";

describe("PlaybackClock", () => {
  it("advances one frame per FRAME_MS of wall clock", () => {
    const clock = new PlaybackClock(50);
    expect(clock.tick(FRAME_MS - 1)).toBe(0);
    expect(clock.tick(1)).toBe(1);
    expect(clock.tick(3 * FRAME_MS)).toBe(4);
  });

  it("keeps a single cursor for both panes (lockstep by construction)", () => {
    const clock = new PlaybackClock(10);
    clock.tick(5 * FRAME_MS);
    const left = clock.cursor;
    const right = clock.cursor;
    expect(left).toBe(right);
  });

  it("loops at the end when loop is set", () => {
    const clock = new PlaybackClock(3);
    clock.tick(3 * FRAME_MS);
    expect(clock.cursor).toBe(0);
  });

  it("stops at the last frame when loop is off", () => {
    const clock = new PlaybackClock(3);
    clock.loop = false;
    clock.tick(10 * FRAME_MS);
    expect(clock.cursor).toBe(2);
    expect(clock.playing).toBe(false);
  });

  it("clamps scrubbing to [0, frames-1]", () => {
    const clock = new PlaybackClock(50);
    expect(clock.scrub(-5)).toBe(0);
    expect(clock.scrub(31.4)).toBe(31);
    expect(clock.scrub(400)).toBe(49);
  });

  it("pausing freezes the cursor", () => {
    const clock = new PlaybackClock(10);
    clock.toggle();
    expect(clock.tick(20 * FRAME_MS)).toBe(0);
  });

  it("rejects empty traces", () => {
    expect(() => new PlaybackClock(0)).toThrow();
  });
});

describe("toCanvas", () => {
  it("maps world bounds to pixel corners with y flipped", () => {
    expect(toCanvas({ x: -2, y: -2 }, 2, 100)).toEqual({ x: 0, y: 100 });
    expect(toCanvas({ x: 2, y: 2 }, 2, 100)).toEqual({ x: 100, y: 0 });
    expect(toCanvas({ x: 0, y: 0 }, 2, 100)).toEqual({ x: 50, y: 50 });
  });
});
