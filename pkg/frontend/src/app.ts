// Single-page labelling client: polls the service, animates the current query
// pair side by side, and posts one choice per pair. All displayed values come
// from the service API; returns and rewards never reach this client.

import {
  ApiClient,
  ConflictError,
  KEY_TO_CHOICE,
  type LabelChoice,
  type PendingPair,
} from "./api.js";
import { drawTrace, PlaybackClock } from "./playback.js";

const POLL_MS = 1000;
const CANVAS_SIZE = 320;

type Screen = "waiting" | "labelling" | "done";

class LabellerApp {
  private api = new ApiClient();
  private sessionId: string | null = null;
  private queue: PendingPair[] = [];
  private total = 0;
  private clock: PlaybackClock | null = null;
  private screen: Screen = "waiting";
  private lastFrameTime = 0;
  private notice = "";

  private leftCtx: CanvasRenderingContext2D;
  private rightCtx: CanvasRenderingContext2D;

  constructor() {
    this.leftCtx = this.canvas("left").getContext("2d")!;
    this.rightCtx = this.canvas("right").getContext("2d")!;
    document.addEventListener("keydown", (ev) => this.onKey(ev));
    this.byId("play-pause").addEventListener("click", () => this.clock?.toggle());
    const slider = this.byId("scrub") as HTMLInputElement;
    slider.addEventListener("input", () => {
      if (this.clock) {
        this.clock.playing = false;
        this.clock.scrub(slider.valueAsNumber);
      }
    });
    for (const choice of ["first", "second", "equal", "skip"] as LabelChoice[]) {
      this.byId(`btn-${choice}`).addEventListener("click", () => this.submit(choice));
    }
    window.setInterval(() => void this.poll(), POLL_MS);
    void this.poll();
    requestAnimationFrame((t) => this.animate(t));
  }

  private byId(id: string): HTMLElement {
    const el = document.getElementById(id);
    if (!el) throw new Error(`missing element #${id}`);
    return el;
  }

  private canvas(id: string): HTMLCanvasElement {
    const el = this.byId(id) as HTMLCanvasElement;
    el.width = CANVAS_SIZE;
    el.height = CANVAS_SIZE;
    return el;
  }

  private async poll(): Promise<void> {
    try {
      this.setNotice("");
      const latest = await this.api.latestSession();
      if (latest.status !== "active" || latest.session_id === null) {
        if (this.screen === "labelling") this.setScreen("done");
        else if (this.screen !== "done") this.setScreen("waiting");
        return;
      }
      if (latest.session_id !== this.sessionId || this.queue.length === 0) {
        this.sessionId = latest.session_id;
        this.total = latest.total ?? latest.pending;
        this.queue = await this.api.pending(this.sessionId);
        this.nextPair();
      }
    } catch {
      this.setNotice("service unreachable, retrying…");
    }
  }

  private nextPair(): void {
    if (this.queue.length === 0) {
      this.setScreen(this.total > 0 ? "done" : "waiting");
      this.clock = null;
      return;
    }
    const pair = this.queue[0];
    this.clock = new PlaybackClock(pair.trace_a.frames.length);
    const slider = this.byId("scrub") as HTMLInputElement;
    slider.max = String(pair.trace_a.frames.length - 1);
    slider.valueAsNumber = 0;
    this.byId("progress").textContent =
      `${this.total - this.queue.length + 1} / ${this.total}`;
    this.setScreen("labelling");
  }

  private async submit(choice: LabelChoice): Promise<void> {
    const pair = this.queue[0];
    if (!pair || !this.sessionId) return;
    try {
      await this.api.submitLabel(this.sessionId, pair.pair_id, choice);
    } catch (err) {
      if (err instanceof ConflictError) {
        this.setNotice("pair was already labelled; skipping forward");
      } else {
        this.setNotice("submission failed, retrying on next poll");
        return;
      }
    }
    this.queue.shift();
    this.nextPair();
  }

  private onKey(ev: KeyboardEvent): void {
    const choice = KEY_TO_CHOICE[ev.key];
    if (choice && this.screen === "labelling") {
      void this.submit(choice);
    } else if (ev.key === " " && this.clock) {
      ev.preventDefault();
      this.clock.toggle();
    }
  }

  private animate(t: number): void {
    const dt = this.lastFrameTime ? t - this.lastFrameTime : 0;
    this.lastFrameTime = t;
    const pair = this.queue[0];
    if (pair && this.clock && this.screen === "labelling") {
      const cursor = this.clock.tick(dt);
      drawTrace(this.leftCtx, pair.trace_a, cursor, CANVAS_SIZE);
      drawTrace(this.rightCtx, pair.trace_b, cursor, CANVAS_SIZE);
      const slider = this.byId("scrub") as HTMLInputElement;
      if (this.clock.playing) slider.valueAsNumber = cursor;
      this.byId("frame-label").textContent =
        `t = ${cursor + 1}/${this.clock.length}`;
    }
    requestAnimationFrame((next) => this.animate(next));
  }

  private setScreen(screen: Screen): void {
    this.screen = screen;
    this.byId("waiting").hidden = screen !== "waiting";
    this.byId("labeller").hidden = screen !== "labelling";
    this.byId("done").hidden = screen !== "done";
  }

  private setNotice(text: string): void {
    this.notice = text;
    this.byId("notice").textContent = text;
    this.byId("notice").hidden = text === "";
  }
}

document.addEventListener("DOMContentLoaded", () => new LabellerApp());
