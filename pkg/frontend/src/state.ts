/**
 * Session state machine: staging clicks and strokes, submitting steps,
 * mirroring the server's committed masks.
 *
 * The machine is deliberately DOM-free so the pointer protocol can be tested
 * against scripted event fixtures.  Rules it enforces:
 *
 *  - left button stages positive points, right button negative;
 *  - a drag records a polyline vertex whenever the pointer enters a new image
 *    pixel; the raw vertices are sent and the server densifies them;
 *  - one staged batch holds one polarity, switching polarity submits the
 *    staged batch first;
 *  - the overlay is never mutated locally: it always holds the bytes the
 *    server returned for the latest committed step.
 */

import { Polarity, QisApi, StepSummary } from './api.js';

export type Phase = 'idle' | 'staging' | 'submitting';

export interface PointerEventLike {
  type: 'down' | 'move' | 'up';
  button: number; // 0 = left/positive, 2 = right/negative
  canvasX: number;
  canvasY: number;
}

export interface Point {
  x: number;
  y: number;
}

export interface StagedBatch {
  polarity: Polarity;
  points: Point[];
  isStroke: boolean;
}

export function canvasToImage(canvasX: number, canvasY: number, zoom: number): Point {
  return { x: Math.floor(canvasX / zoom), y: Math.floor(canvasY / zoom) };
}

export class CanvasSession {
  phase: Phase = 'idle';
  sessionId: string | null = null;
  zoom = 1.0;
  staged: StagedBatch | null = null;
  history: StepSummary[] = [];
  currentStep = -1;
  overlay: Uint8Array | null = null;
  banner: string | null = null;

  private dragging = false;
  private nextStep = 1;

  constructor(private api: QisApi, private onChange: () => void = () => {}) {}

  get canSubmit(): boolean {
    return this.phase === 'staging' && this.staged !== null
      && this.staged.points.length > 0;
  }

  get canUndo(): boolean {
    return this.phase !== 'submitting' && this.currentStep > 0;
  }

  async open(image: Blob, template: Blob | [number, number][],
             params?: Record<string, number>): Promise<void> {
    const created = await this.api.createSession(image, template, params);
    this.sessionId = created.session_id;
    this.history = [created.step0];
    this.currentStep = 0;
    this.nextStep = 1;
    this.overlay = await this.api.fetchMask(created.session_id, 0);
    this.phase = 'idle';
    this.onChange();
  }

  /** Feed one pointer event; resolves after any polarity-switch auto-submit. */
  async pointer(ev: PointerEventLike): Promise<void> {
    if (this.phase === 'submitting' || this.sessionId === null) return;
    const polarity: Polarity = ev.button === 2 ? 'neg' : 'pos';
    const pt = canvasToImage(ev.canvasX, ev.canvasY, this.zoom);

    if (ev.type === 'down') {
      if (this.staged && this.staged.polarity !== polarity) {
        await this.submit(); // switching polarity flushes the staged batch
      }
      if (!this.staged) {
        this.staged = { polarity, points: [], isStroke: false };
        this.phase = 'staging';
      }
      this.dragging = true;
      this.pushVertex(pt);
    } else if (ev.type === 'move' && this.dragging && this.staged) {
      this.staged.isStroke = true;
      this.pushVertex(pt);
    } else if (ev.type === 'up') {
      if (this.dragging && this.staged) {
        const before = this.staged.points.length;
        this.pushVertex(pt); // the release point belongs to the gesture
        if (this.staged.points.length > before) this.staged.isStroke = true;
      }
      this.dragging = false;
    }
    this.onChange();
  }

  private pushVertex(pt: Point): void {
    if (!this.staged) return;
    const last = this.staged.points[this.staged.points.length - 1];
    if (!last || last.x !== pt.x || last.y !== pt.y) {
      this.staged.points.push(pt);
    }
  }

  discardStaged(): void {
    this.staged = null;
    if (this.phase === 'staging') this.phase = 'idle';
    this.onChange();
  }

  /** Submit the staged batch; the overlay updates within this request cycle. */
  async submit(): Promise<StepSummary | null> {
    if (!this.canSubmit || this.sessionId === null || this.staged === null) return null;
    const batch = this.staged;
    this.phase = 'submitting';
    this.banner = null;
    this.onChange();
    try {
      const body = batch.isStroke
        ? {
            step: this.nextStep, polarity: batch.polarity,
            stroke: batch.points.map((p) => [p.x, p.y] as [number, number]),
          }
        : { step: this.nextStep, polarity: batch.polarity, points: batch.points };
      const summary = await this.api.postStep(this.sessionId, body);
      if (summary.warnings.includes('ineffective_click')) {
        // nothing was applied; keep the stage so the user can adjust it
        this.banner = 'ineffective_click';
        this.phase = 'staging';
        this.onChange();
        return summary;
      }
      this.overlay = await this.api.fetchMask(this.sessionId, summary.step);
      this.history = [...this.history.slice(0, this.currentStep + 1), summary];
      this.currentStep += 1;
      this.nextStep = summary.step + 1;
      this.staged = null;
      this.phase = 'idle';
      this.onChange();
      return summary;
    } catch (err) {
      const code = (err as { code?: string }).code;
      this.banner = code === 'step_in_flight' ? 'step in progress' : (code ?? 'error');
      this.phase = this.staged ? 'staging' : 'idle';
      this.onChange();
      return null;
    }
  }

  async undo(): Promise<void> {
    if (!this.canUndo || this.sessionId === null) return;
    this.phase = 'submitting';
    this.onChange();
    try {
      const resp = await this.api.undo(this.sessionId);
      this.currentStep = resp.current;
      this.nextStep = resp.step.step + 1;
      this.overlay = await this.api.fetchMask(this.sessionId, resp.current);
    } finally {
      this.phase = this.staged ? 'staging' : 'idle';
      this.onChange();
    }
  }

  exportMaskUrl(): string | null {
    if (this.sessionId === null || this.currentStep < 0) return null;
    return this.history[this.currentStep]?.mask_url ?? null;
  }
}
