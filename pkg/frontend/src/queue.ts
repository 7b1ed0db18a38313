import { ApiError, ReviewApi } from './api';
import type { SampleStatus, SampleView, Stats, Verdict } from './api';

export const PREFETCH_DEPTH = 3;

const VERDICT_STATUS: Record<Verdict, SampleStatus> = {
  accept: 'accepted',
  reject: 'rejected',
  full_coverage: 'full_coverage',
};

export interface QueueState {
  current: SampleView | null;
  /** Samples queued after the current one, up to PREFETCH_DEPTH deep. */
  upcoming: SampleView[];
  counts: Record<SampleStatus, number>;
  pending: boolean;
  error: string | null;
  done: boolean;
  stats: Stats | null;
}

/** Screening queue over the review API.
 *
 * All state is reconstructed from the server on init, so a page refresh
 * loses nothing beyond transient prefetch. At most one decision request is
 * in flight at a time; the UI state always reflects the last acknowledged
 * server response.
 */
export class ReviewQueue {
  private items: SampleView[] = [];
  private index = 0;
  private cursor: string | null = null;
  private exhausted = false;
  private pending = false;
  private error: string | null = null;
  private stats: Stats | null = null;
  private counts: Record<SampleStatus, number> = {
    pending: 0,
    accepted: 0,
    rejected: 0,
    full_coverage: 0,
  };

  constructor(
    private readonly api: ReviewApi,
    private readonly onChange: (state: QueueState) => void = () => {}
  ) {}

  async init(): Promise<void> {
    this.items = [];
    this.index = 0;
    this.cursor = null;
    this.exhausted = false;
    this.error = null;
    this.stats = null;
    const stats = await this.api.getStats();
    this.counts = { ...stats.status_counts };
    await this.fillAhead();
    if (this.current() === null) {
      await this.finish();
    }
    this.notify();
  }

  current(): SampleView | null {
    return this.items[this.index] ?? null;
  }

  state(): QueueState {
    return {
      current: this.current(),
      upcoming: this.items.slice(this.index + 1, this.index + 1 + PREFETCH_DEPTH),
      counts: { ...this.counts },
      pending: this.pending,
      error: this.error,
      done: this.stats !== null,
      stats: this.stats,
    };
  }

  async decide(verdict: Verdict): Promise<void> {
    const sample = this.current();
    if (sample === null || this.pending) {
      return;
    }
    this.pending = true;
    this.error = null;
    this.notify();
    try {
      const acknowledged = await this.api.postDecision(sample.id, verdict);
      this.items[this.index] = acknowledged;
      this.counts[sample.status] -= 1;
      this.counts[VERDICT_STATUS[verdict]] += 1;
      this.index += 1;
      await this.fillAhead();
      if (this.current() === null) {
        await this.finish();
      }
    } catch (err) {
      this.error = err instanceof ApiError ? err.message : String(err);
    } finally {
      this.pending = false;
      this.notify();
    }
  }

  next(): void {
    if (this.index < this.items.length - 1) {
      this.index += 1;
      void this.fillAhead().then(() => this.notify());
    }
    this.notify();
  }

  prev(): void {
    if (this.index > 0) {
      this.index -= 1;
      this.stats = null;
    }
    this.notify();
  }

  private async fillAhead(): Promise<void> {
    while (!this.exhausted && this.items.length - this.index <= PREFETCH_DEPTH) {
      const page = await this.api.listSamples({
        status: 'pending',
        limit: PREFETCH_DEPTH + 1,
        after: this.cursor ?? undefined,
      });
      this.items.push(...page.samples);
      if (page.next === null) {
        this.exhausted = true;
      } else {
        this.cursor = page.next;
      }
      if (page.samples.length === 0) {
        break;
      }
    }
  }

  private async finish(): Promise<void> {
    this.stats = await this.api.getStats();
    this.counts = { ...this.stats.status_counts };
  }

  private notify(): void {
    this.onChange(this.state());
  }
}
