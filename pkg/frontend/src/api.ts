export type SampleStatus = 'pending' | 'accepted' | 'rejected' | 'full_coverage';
export type Verdict = 'accept' | 'reject' | 'full_coverage';

export interface SampleView {
  id: string;
  status: SampleStatus;
  image_url: string;
  depth_url: string;
  overlay_url: string;
  coverage?: number;
}

export interface SamplePage {
  samples: SampleView[];
  next: string | null;
}

export interface Stats {
  status_counts: Record<SampleStatus, number>;
  coverage: { bins: number; counts: number[]; total: number };
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string
  ) {
    super(message);
  }
}

async function request<T>(input: string, init?: RequestInit): Promise<T> {
  let response: Response;
  try {
    response = await fetch(input, init);
  } catch (err) {
    throw new ApiError(0, 'network', err instanceof Error ? err.message : String(err));
  }
  if (!response.ok) {
    let code = 'error';
    let message = `${response.status} ${response.statusText}`;
    try {
      const body = (await response.json()) as { error?: string; code?: string };
      if (body.code) code = body.code;
      if (body.error) message = body.error;
    } catch {
      // non-JSON error body; keep the status line
    }
    throw new ApiError(response.status, code, message);
  }
  return (await response.json()) as T;
}

export class ReviewApi {
  constructor(private readonly base = '') {}

  listSamples(opts: { status?: SampleStatus; limit?: number; after?: string } = {}): Promise<SamplePage> {
    const params = new URLSearchParams();
    if (opts.status) params.set('status', opts.status);
    if (opts.limit !== undefined) params.set('limit', String(opts.limit));
    if (opts.after !== undefined) params.set('after', opts.after);
    const query = params.toString();
    return request<SamplePage>(`${this.base}/api/samples${query ? `?${query}` : ''}`);
  }

  getSample(id: string): Promise<SampleView> {
    return request<SampleView>(`${this.base}/api/samples/${id}`);
  }

  postDecision(id: string, verdict: Verdict, operator = ''): Promise<SampleView> {
    return request<SampleView>(`${this.base}/api/samples/${id}/decision`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ verdict, operator }),
    });
  }

  getStats(): Promise<Stats> {
    return request<Stats>(`${this.base}/api/stats`);
  }
}
