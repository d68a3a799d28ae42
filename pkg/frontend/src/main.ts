/** Wires the session state machine to the page. */

import { QisApi } from './api.js';
import { decodeMask, drawScene, tintMask, DEFAULT_STYLE } from './render.js';
import { CanvasSession, PointerEventLike } from './state.js';

function el<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) throw new Error(`missing element #${id}`);
  return found as T;
}

async function blobFromInput(input: HTMLInputElement): Promise<Blob | null> {
  return input.files && input.files[0] ? input.files[0] : null;
}

export function boot(): void {
  const baseUrl = (window as unknown as { QIS_BASE_URL?: string }).QIS_BASE_URL ?? '';
  const api = new QisApi(baseUrl);
  const canvas = el<HTMLCanvasElement>('canvas');
  const ctx = canvas.getContext('2d')!;
  const status = el<HTMLDivElement>('status');
  const historyEl = el<HTMLTableSectionElement>('history');
  const submitBtn = el<HTMLButtonElement>('submit');
  const undoBtn = el<HTMLButtonElement>('undo');
  const exportBtn = el<HTMLAnchorElement>('export');
  const zoomInput = el<HTMLInputElement>('zoom');

  let image: ImageBitmap | null = null;
  let maskSprite: HTMLCanvasElement | null = null;
  const polygon: [number, number][] = [];
  let drawingTemplate = false;

  const session = new CanvasSession(api, onChange);

  async function refreshOverlay(): Promise<void> {
    maskSprite = session.overlay
      ? tintMask(await decodeMask(session.overlay), DEFAULT_STYLE.maskColor)
      : null;
  }

  function onChange(): void {
    void refreshOverlay().then(() => {
      drawScene(ctx, image, maskSprite, session.staged, session.zoom);
      submitBtn.disabled = !session.canSubmit;
      undoBtn.disabled = !session.canUndo;
      const url = session.exportMaskUrl();
      if (url) exportBtn.href = baseUrl + url;
      const rec = session.history[session.currentStep];
      status.textContent = session.banner
        ? `warning: ${session.banner}`
        : rec
          ? `step ${rec.step}  r=${rec.r === null ? '-' : rec.r.toFixed(2)}  `
            + `energy=${rec.energy.toExponential(3)}  ${rec.time_ms.toFixed(0)} ms`
          : 'no session';
      historyEl.innerHTML = session.history
        .slice(0, session.currentStep + 1)
        .map((s) => `<tr><td>${s.step}</td><td>${s.r === null ? '-' : s.r.toFixed(2)}</td>`
          + `<td>${s.energy.toExponential(2)}</td><td>${s.time_ms.toFixed(0)}</td></tr>`)
        .join('');
    });
  }

  function toEvent(e: PointerEvent, type: PointerEventLike['type']): PointerEventLike {
    const rect = canvas.getBoundingClientRect();
    return {
      type,
      button: type === 'move' ? (e.buttons & 2 ? 2 : 0) : e.button,
      canvasX: e.clientX - rect.left,
      canvasY: e.clientY - rect.top,
    };
  }

  canvas.addEventListener('contextmenu', (e) => e.preventDefault());
  canvas.addEventListener('pointerdown', (e) => {
    if (drawingTemplate) {
      const rect = canvas.getBoundingClientRect();
      polygon.push([
        Math.floor((e.clientX - rect.left) / session.zoom),
        Math.floor((e.clientY - rect.top) / session.zoom),
      ]);
      return;
    }
    void session.pointer(toEvent(e, 'down'));
  });
  canvas.addEventListener('pointermove', (e) => {
    if (e.buttons !== 0 && !drawingTemplate) void session.pointer(toEvent(e, 'move'));
  });
  canvas.addEventListener('pointerup', (e) => void session.pointer(toEvent(e, 'up')));

  submitBtn.addEventListener('click', () => void session.submit());
  undoBtn.addEventListener('click', () => void session.undo());
  zoomInput.addEventListener('change', () => {
    session.zoom = Number(zoomInput.value) || 1;
    canvas.width = (image?.width ?? 512) * session.zoom;
    canvas.height = (image?.height ?? 512) * session.zoom;
    onChange();
  });

  el<HTMLButtonElement>('draw-template').addEventListener('click', () => {
    drawingTemplate = true;
    polygon.length = 0;
    status.textContent = 'click polygon vertices, then press Start';
  });

  el<HTMLButtonElement>('start').addEventListener('click', () => {
    void (async () => {
      const imageBlob = await blobFromInput(el<HTMLInputElement>('image-file'));
      if (!imageBlob) {
        status.textContent = 'choose an image first';
        return;
      }
      const templateBlob = await blobFromInput(el<HTMLInputElement>('template-file'));
      const template = templateBlob ?? polygon;
      if (!(template instanceof Blob) && template.length < 3) {
        status.textContent = 'upload a template mask or draw at least 3 vertices';
        return;
      }
      drawingTemplate = false;
      image = await createImageBitmap(imageBlob);
      canvas.width = image.width * session.zoom;
      canvas.height = image.height * session.zoom;
      status.textContent = 'solving step 0...';
      try {
        await session.open(imageBlob, template);
      } catch (err) {
        status.textContent = `error: ${(err as { message?: string }).message ?? err}`;
      }
    })();
  });
}

if (typeof document !== 'undefined' && document.getElementById('canvas')) {
  boot();
}
