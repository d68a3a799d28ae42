import { describe, expect, it } from 'vitest';

import { ApiError, QisApi } from '../src/api.js';

describe('api client', () => {
  it('posts multipart create with a polygon template', async () => {
    let got: { url: string; form: FormData } | null = null;
    const api = new QisApi('http://host', async (url, init) => {
      got = { url, form: init!.body as FormData };
      return new Response(JSON.stringify({
        session_id: 's1',
        step0: { step: 0, r: null, energy: 1, min_det: 1, time_ms: 1,
                 warnings: [], mask_url: '/v1/sessions/s1/mask?step=0' },
      }), { status: 201 });
    });
    const created = await api.createSession(
      new Blob([new Uint8Array([1, 2, 3])]), [[1, 1], [5, 1], [5, 5]]);
    expect(created.session_id).toBe('s1');
    expect(got!.url).toBe('http://host/v1/sessions');
    expect(got!.form.get('polygon')).toBe('[[1,1],[5,1],[5,5]]');
    expect(got!.form.get('image')).toBeInstanceOf(Blob);
  });

  it('raises typed errors with the server code', async () => {
    const api = new QisApi('', async () => new Response(
      JSON.stringify({ code: 'unknown_session', message: 'no such session' }),
      { status: 404 }));
    try {
      await api.postStep('nope', { step: 1, polarity: 'pos', points: [{ x: 0, y: 0 }] });
      expect.unreachable();
    } catch (err) {
      expect((err as ApiError).status).toBe(404);
      expect((err as ApiError).code).toBe('unknown_session');
    }
  });

  it('fetches masks as raw bytes', async () => {
    const payload = new Uint8Array([137, 80, 78, 71]);
    const api = new QisApi('', async (url) => {
      expect(url).toBe('/v1/sessions/s1/mask?step=2');
      return new Response(payload.buffer as ArrayBuffer, { status: 200 });
    });
    expect(await api.fetchMask('s1', 2)).toEqual(payload);
  });
});
