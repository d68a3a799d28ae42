/**
 * Typed client for the /v1 session API.
 *
 * The server owns every mask: the client only uploads inputs, posts click
 * steps and downloads the committed overlays.
 */

export type Polarity = 'pos' | 'neg';

export interface StepSummary {
  step: number;
  r: number | null;
  energy: number;
  min_det: number;
  time_ms: number;
  warnings: string[];
  mask_url: string;
}

export interface CreateResponse {
  session_id: string;
  step0: StepSummary;
}

export interface StepBody {
  step: number;
  polarity: Polarity;
  points?: { x: number; y: number }[];
  stroke?: [number, number][];
}

export interface ApiError {
  status: number;
  code: string;
  message: string;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

async function parseError(resp: Response): Promise<ApiError> {
  let code = 'unknown';
  let message = resp.statusText;
  try {
    const body = await resp.json();
    code = body.code ?? code;
    message = body.message ?? message;
  } catch {
    /* non-JSON error body */
  }
  return { status: resp.status, code, message };
}

export class QisApi {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = fetch.bind(globalThis),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async createSession(
    image: Blob,
    template: Blob | [number, number][],
    params?: Record<string, number>,
  ): Promise<CreateResponse> {
    const form = new FormData();
    form.append('image', image, 'image.png');
    if (template instanceof Blob) {
      form.append('template', template, 'template.png');
    } else {
      form.append('polygon', JSON.stringify(template));
    }
    if (params) {
      form.append('params', JSON.stringify(params));
    }
    const resp = await this.fetchImpl(this.url('/v1/sessions'), {
      method: 'POST',
      body: form,
    });
    if (resp.status !== 201) throw await parseError(resp);
    return resp.json();
  }

  async postStep(sessionId: string, body: StepBody): Promise<StepSummary> {
    const resp = await this.fetchImpl(this.url(`/v1/sessions/${sessionId}/clicks`), {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
    });
    if (resp.status !== 200) throw await parseError(resp);
    return resp.json();
  }

  async fetchMask(sessionId: string, step?: number): Promise<Uint8Array> {
    const suffix = step === undefined ? '' : `?step=${step}`;
    const resp = await this.fetchImpl(this.url(`/v1/sessions/${sessionId}/mask${suffix}`));
    if (resp.status !== 200) throw await parseError(resp);
    return new Uint8Array(await resp.arrayBuffer());
  }

  async undo(sessionId: string): Promise<{ current: number; step: StepSummary }> {
    const resp = await this.fetchImpl(this.url(`/v1/sessions/${sessionId}/undo`), {
      method: 'POST',
    });
    if (resp.status !== 200) throw await parseError(resp);
    return resp.json();
  }

  async state(sessionId: string): Promise<{ current: number; steps: StepSummary[] }> {
    const resp = await this.fetchImpl(this.url(`/v1/sessions/${sessionId}/state`));
    if (resp.status !== 200) throw await parseError(resp);
    return resp.json();
  }

  async deleteSession(sessionId: string): Promise<void> {
    await this.fetchImpl(this.url(`/v1/sessions/${sessionId}`), { method: 'DELETE' });
  }
}
