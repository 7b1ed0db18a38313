import { ReviewApi } from './api';
import { bindKeys } from './keys';
import { OVERLAY_MODES, assetUrl, nextMode, prefetchUrls } from './overlay';
import type { OverlayMode } from './overlay';
import { ReviewQueue } from './queue';
import type { QueueState } from './queue';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

export function mount(): void {
  const viewer = el<HTMLImageElement>('viewer');
  const sampleLabel = el<HTMLElement>('sample-label');
  const modeLabel = el<HTMLElement>('mode-label');
  const countsLabel = el<HTMLElement>('counts');
  const errorBanner = el<HTMLElement>('error-banner');
  const completion = el<HTMLElement>('completion');

  let mode: OverlayMode = OVERLAY_MODES[0];
  let lastState: QueueState | null = null;
  const warmed = new Set<string>();

  const render = (state: QueueState) => {
    lastState = state;
    errorBanner.textContent = state.error ?? '';
    errorBanner.hidden = state.error === null;
    const counts = state.counts;
    countsLabel.textContent =
      `pending ${counts.pending} · accepted ${counts.accepted} · ` +
      `rejected ${counts.rejected} · full ${counts.full_coverage}`;
    if (state.done && state.stats) {
      completion.hidden = false;
      completion.textContent = `screening complete — ${JSON.stringify(state.stats.status_counts)}`;
      viewer.hidden = true;
      sampleLabel.textContent = '';
      return;
    }
    completion.hidden = true;
    viewer.hidden = false;
    if (state.current) {
      sampleLabel.textContent = `${state.current.id} (${state.current.status})`;
      modeLabel.textContent = mode;
      viewer.src = assetUrl(state.current, mode);
      for (const url of prefetchUrls(state.upcoming, mode)) {
        if (!warmed.has(url)) {
          warmed.add(url);
          new Image().src = url;
        }
      }
    }
  };

  const queue = new ReviewQueue(new ReviewApi(), render);

  bindKeys(window, {
    verdict: (verdict) => void queue.decide(verdict),
    cycleOverlay: () => {
      mode = nextMode(mode);
      if (lastState) {
        render(lastState);
      }
    },
    next: () => queue.next(),
    prev: () => queue.prev(),
  });

  void queue.init().catch((err) => {
    errorBanner.hidden = false;
    errorBanner.textContent = err instanceof Error ? err.message : String(err);
  });
}

if (typeof document !== 'undefined' && document.getElementById('viewer')) {
  mount();
}
