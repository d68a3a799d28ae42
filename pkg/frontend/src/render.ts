/** Canvas drawing: base image, server mask overlay, staged points. */

import { StagedBatch } from './state.js';

export interface OverlayStyle {
  maskColor: [number, number, number];
  maskOpacity: number;
}

export const DEFAULT_STYLE: OverlayStyle = {
  maskColor: [66, 133, 244],
  maskOpacity: 0.45,
};

export async function decodeMask(png: Uint8Array): Promise<ImageBitmap> {
  return createImageBitmap(new Blob([png.buffer as ArrayBuffer], { type: 'image/png' }));
}

export function drawScene(
  ctx: CanvasRenderingContext2D,
  image: ImageBitmap | null,
  maskTint: HTMLCanvasElement | null,
  staged: StagedBatch | null,
  zoom: number,
  style: OverlayStyle = DEFAULT_STYLE,
): void {
  ctx.save();
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  ctx.scale(zoom, zoom);
  if (image) ctx.drawImage(image, 0, 0);
  if (maskTint) {
    ctx.globalAlpha = style.maskOpacity;
    ctx.drawImage(maskTint, 0, 0);
    ctx.globalAlpha = 1.0;
  }
  if (staged) {
    ctx.fillStyle = staged.polarity === 'pos' ? 'rgba(46, 160, 67, 0.95)'
                                              : 'rgba(248, 81, 73, 0.95)';
    for (const p of staged.points) {
      ctx.beginPath();
      ctx.arc(p.x + 0.5, p.y + 0.5, Math.max(1.5, 2.5 / zoom), 0, 2 * Math.PI);
      ctx.fill();
    }
  }
  ctx.restore();
}

/** White mask pixels become a tinted sprite used for the translucent overlay. */
export function tintMask(mask: ImageBitmap, color: [number, number, number]): HTMLCanvasElement {
  const sprite = document.createElement('canvas');
  sprite.width = mask.width;
  sprite.height = mask.height;
  const ctx = sprite.getContext('2d')!;
  ctx.drawImage(mask, 0, 0);
  const data = ctx.getImageData(0, 0, sprite.width, sprite.height);
  const px = data.data;
  for (let i = 0; i < px.length; i += 4) {
    const on = px[i] > 127;
    px[i] = color[0];
    px[i + 1] = color[1];
    px[i + 2] = color[2];
    px[i + 3] = on ? 255 : 0;
  }
  ctx.putImageData(data, 0, 0);
  return sprite;
}
