// Lockstep playback over two trajectory traces: one shared cursor drives both
// panes so the human always compares the same timestep.

import type { Frame, Trace } from "./api.js";

export const FRAME_MS = 80; // playback speed: 12.5 frames/s

export class PlaybackClock {
  cursor = 0;
  playing = true;
  loop = true;
  private accumulator = 0;

  constructor(public length: number) {
    if (length < 1) throw new Error("trace must have at least one frame");
  }

  /** Advance by wall-clock dt; returns the (possibly unchanged) cursor. */
  tick(dtMs: number): number {
    if (!this.playing) return this.cursor;
    this.accumulator += dtMs;
    while (this.accumulator >= FRAME_MS) {
      this.accumulator -= FRAME_MS;
      if (this.cursor + 1 < this.length) {
        this.cursor += 1;
      } else if (this.loop) {
        this.cursor = 0;
      } else {
        this.playing = false;
      }
    }
    return this.cursor;
  }

  scrub(frame: number): number {
    this.cursor = Math.min(Math.max(Math.round(frame), 0), this.length - 1);
    this.accumulator = 0;
    return this.cursor;
  }

  toggle(): boolean {
    this.playing = !this.playing;
    return this.playing;
  }
}

function toCanvas(point: Frame, bounds: number, size: number): Frame {
  // world [-bounds, bounds]^2 -> canvas pixels, y flipped
  return {
    x: ((point.x + bounds) / (2 * bounds)) * size,
    y: size - ((point.y + bounds) / (2 * bounds)) * size,
  };
}

export function drawTrace(
  ctx: CanvasRenderingContext2D,
  trace: Trace,
  cursor: number,
  size: number,
): void {
  ctx.clearRect(0, 0, size, size);
  ctx.fillStyle = "#10131a";
  ctx.fillRect(0, 0, size, size);

  // goal marker
  const goal = toCanvas(trace.goal, trace.bounds, size);
  ctx.strokeStyle = "#3fb950";
  ctx.lineWidth = 2;
  ctx.beginPath();
  ctx.arc(goal.x, goal.y, 9, 0, 2 * Math.PI);
  ctx.stroke();
  ctx.beginPath();
  ctx.arc(goal.x, goal.y, 2, 0, 2 * Math.PI);
  ctx.fillStyle = "#3fb950";
  ctx.fill();

  // trail up to the cursor
  ctx.strokeStyle = "#4184e4";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  for (let i = 0; i <= cursor && i < trace.frames.length; i++) {
    const p = toCanvas(trace.frames[i], trace.bounds, size);
    if (i === 0) ctx.moveTo(p.x, p.y);
    else ctx.lineTo(p.x, p.y);
  }
  ctx.stroke();

  // current position
  const here = toCanvas(trace.frames[Math.min(cursor, trace.frames.length - 1)],
    trace.bounds, size);
  ctx.beginPath();
  ctx.arc(here.x, here.y, 5, 0, 2 * Math.PI);
  ctx.fillStyle = "#e3b341";
  ctx.fill();
}

export { toCanvas };
