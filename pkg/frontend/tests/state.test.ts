/**
 * State-machine tests driven by scripted pointer fixtures.  The stroke
 * fixture's expected vertices and their dense expansion were produced by the
 * server's own densifier, so these tests pin the client/server contract.
 */

import { readFileSync } from 'node:fs';
import { dirname, join } from 'node:path';
import { fileURLToPath } from 'node:url';
import { describe, expect, it } from 'vitest';

import { QisApi, StepSummary } from '../src/api.js';
import { CanvasSession, canvasToImage, PointerEventLike } from '../src/state.js';

const here = dirname(fileURLToPath(import.meta.url));
const strokeFixture = JSON.parse(
  readFileSync(join(here, 'fixtures', 'stroke_fixture.json'), 'utf-8'),
);
const tacoFixture = JSON.parse(
  readFileSync(join(here, 'fixtures', 'taco_roundtrip.json'), 'utf-8'),
);

function b64ToBytes(b64: string): Uint8Array {
  return new Uint8Array(Buffer.from(b64, 'base64'));
}

interface ServerLog {
  posts: unknown[];
  maskFetches: string[];
  undos: number;
}

/** Minimal fake of the /v1 surface backed by the taco fixture. */
function fakeServer(log: ServerLog, opts: { conflict?: boolean; ineffective?: boolean } = {}) {
  let current = 0;
  return async (url: string, init?: RequestInit): Promise<Response> => {
    const method = init?.method ?? 'GET';
    if (url.endsWith('/clicks') && method === 'POST') {
      if (opts.conflict) {
        return new Response(
          JSON.stringify({ code: 'step_in_flight', message: 'busy' }), { status: 409 });
      }
      log.posts.push(JSON.parse(init!.body as string));
      if (opts.ineffective) {
        return new Response(JSON.stringify({
          ...tacoFixture.step0, warnings: ['ineffective_click'],
        }), { status: 200 });
      }
      current = 1;
      return new Response(JSON.stringify(tacoFixture.step1), { status: 200 });
    }
    if (url.includes('/mask') && method === 'GET') {
      log.maskFetches.push(url);
      const step = url.includes('step=0') ? 0 : url.includes('step=1') ? 1 : current;
      const bytes = b64ToBytes(step === 0 ? tacoFixture.mask0_png_b64
                                          : tacoFixture.mask1_png_b64);
      return new Response(bytes.buffer as ArrayBuffer, {
        status: 200, headers: { 'Content-Type': 'image/png' } });
    }
    if (url.endsWith('/undo') && method === 'POST') {
      log.undos += 1;
      current = 0;
      return new Response(JSON.stringify({ current: 0, step: tacoFixture.step0 }),
                          { status: 200 });
    }
    throw new Error(`unexpected request ${method} ${url}`);
  };
}

function openedSession(log: ServerLog, opts: Parameters<typeof fakeServer>[1] = {}) {
  const session = new CanvasSession(new QisApi('', fakeServer(log, opts)));
  session.sessionId = tacoFixture.session_id;
  session.history = [tacoFixture.step0 as StepSummary];
  session.currentStep = 0;
  session.overlay = b64ToBytes(tacoFixture.mask0_png_b64);
  return session;
}

describe('canvas-to-image mapping', () => {
  it('is exact under zoom (crosshair echo)', () => {
    for (const zoom of [1, 2, 3, 0.5]) {
      for (const [px, py] of [[0, 0], [17, 3], [80, 40], [127, 127]]) {
        // any canvas position inside the displayed pixel maps back to it
        const cx = px * zoom + 0.49 * zoom;
        const cy = py * zoom + 0.01 * zoom;
        expect(canvasToImage(cx, cy, zoom)).toEqual({ x: px, y: py });
      }
    }
  });
});

describe('pointer protocol', () => {
  it('maps left to positive and right to negative', async () => {
    const log: ServerLog = { posts: [], maskFetches: [], undos: 0 };
    const session = openedSession(log);
    await session.pointer({ type: 'down', button: 0, canvasX: 12, canvasY: 8 });
    await session.pointer({ type: 'up', button: 0, canvasX: 12, canvasY: 8 });
    expect(session.staged?.polarity).toBe('pos');
    expect(session.staged?.points).toEqual([{ x: 12, y: 8 }]);
    session.discardStaged();
    await session.pointer({ type: 'down', button: 2, canvasX: 30, canvasY: 40 });
    expect(session.staged?.polarity).toBe('neg');
  });

  it('captures stroke vertices exactly as the server fixture expects', async () => {
    const log: ServerLog = { posts: [], maskFetches: [], undos: 0 };
    const session = openedSession(log);
    session.zoom = strokeFixture.zoom;
    for (const ev of strokeFixture.script as PointerEventLike[]) {
      await session.pointer(ev);
    }
    expect(session.staged?.polarity).toBe(strokeFixture.polarity);
    expect(session.staged?.isStroke).toBe(true);
    const captured = session.staged!.points.map((p) => [p.x, p.y]);
    expect(captured).toEqual(strokeFixture.vertices);

    // the server's Bresenham expansion of those raw vertices is dense and
    // passes through every captured vertex in order
    const expansion = strokeFixture.server_expansion as [number, number][];
    for (let i = 1; i < expansion.length; i++) {
      const dx = Math.abs(expansion[i][0] - expansion[i - 1][0]);
      const dy = Math.abs(expansion[i][1] - expansion[i - 1][1]);
      expect(Math.max(dx, dy)).toBe(1);
    }
    let cursor = 0;
    for (const v of strokeFixture.vertices as [number, number][]) {
      cursor = expansion.findIndex(
        (p, idx) => idx >= cursor && p[0] === v[0] && p[1] === v[1]);
      expect(cursor).toBeGreaterThanOrEqual(0);
    }

    // raw vertices go to the server untouched
    await session.submit();
    const body = log.posts[0] as { stroke: [number, number][] };
    expect(body.stroke).toEqual(strokeFixture.vertices);
  });

  it('switching polarity submits the staged batch first', async () => {
    const log: ServerLog = { posts: [], maskFetches: [], undos: 0 };
    const session = openedSession(log);
    await session.pointer({ type: 'down', button: 2, canvasX: 64, canvasY: 25 });
    await session.pointer({ type: 'up', button: 2, canvasX: 64, canvasY: 25 });
    expect(log.posts.length).toBe(0);
    await session.pointer({ type: 'down', button: 0, canvasX: 10, canvasY: 10 });
    expect(log.posts.length).toBe(1);              // negative batch auto-submitted
    expect((log.posts[0] as { polarity: string }).polarity).toBe('neg');
    expect(session.staged?.polarity).toBe('pos');  // new positive batch staged
  });
});

describe('taco demo round trip', () => {
  it('one staged right-click updates the overlay to the server mask in one cycle',
     async () => {
    const log: ServerLog = { posts: [], maskFetches: [], undos: 0 };
    const session = openedSession(log);
    const [x, y] = tacoFixture.neg_click;
    await session.pointer({ type: 'down', button: 2, canvasX: x, canvasY: y });
    await session.pointer({ type: 'up', button: 2, canvasX: x, canvasY: y });
    expect(session.canSubmit).toBe(true);

    const summary = await session.submit();
    expect(log.posts.length).toBe(1);
    expect(log.posts[0]).toEqual({
      step: 1, polarity: 'neg', points: [{ x, y }] });
    expect(summary?.step).toBe(1);
    // overlay now holds exactly the bytes the server committed for step 1
    expect(session.overlay).toEqual(b64ToBytes(tacoFixture.mask1_png_b64));
    expect(session.staged).toBeNull();
    expect(session.phase).toBe('idle');
    expect(session.history.length).toBe(2);
    expect(session.currentStep).toBe(1);
  });

  it('ineffective click keeps the stage for editing', async () => {
    const log: ServerLog = { posts: [], maskFetches: [], undos: 0 };
    const session = openedSession(log, { ineffective: true });
    await session.pointer({ type: 'down', button: 0, canvasX: 5, canvasY: 5 });
    const before = session.overlay;
    await session.submit();
    expect(session.banner).toBe('ineffective_click');
    expect(session.staged?.points).toEqual([{ x: 5, y: 5 }]);
    expect(session.overlay).toBe(before);   // no optimistic mask changes
    expect(session.currentStep).toBe(0);
  });

  it('409 surfaces as step-in-progress and preserves the stage', async () => {
    const log: ServerLog = { posts: [], maskFetches: [], undos: 0 };
    const session = openedSession(log, { conflict: true });
    await session.pointer({ type: 'down', button: 2, canvasX: 9, canvasY: 9 });
    await session.submit();
    expect(session.banner).toBe('step in progress');
    expect(session.staged?.points.length).toBe(1);
    expect(session.phase).toBe('staging');
  });

  it('undo refetches the previous committed mask', async () => {
    const log: ServerLog = { posts: [], maskFetches: [], undos: 0 };
    const session = openedSession(log);
    const [x, y] = tacoFixture.neg_click;
    await session.pointer({ type: 'down', button: 2, canvasX: x, canvasY: y });
    await session.submit();
    expect(session.canUndo).toBe(true);
    await session.undo();
    expect(log.undos).toBe(1);
    expect(session.currentStep).toBe(0);
    expect(session.overlay).toEqual(b64ToBytes(tacoFixture.mask0_png_b64));
    expect(session.canUndo).toBe(false);
  });

  it('submit is disabled with an empty stage', () => {
    const log: ServerLog = { posts: [], maskFetches: [], undos: 0 };
    const session = openedSession(log);
    expect(session.canSubmit).toBe(false);
  });
});
