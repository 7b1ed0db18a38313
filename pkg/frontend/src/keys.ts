import type { Verdict } from './api';

export interface KeyActions {
  verdict(verdict: Verdict): void;
  cycleOverlay(): void;
  next(): void;
  prev(): void;
}

const VERDICT_KEYS: Record<string, Verdict> = {
  a: 'accept',
  r: 'reject',
  f: 'full_coverage',
};

const IGNORED_TAGS = new Set(['INPUT', 'TEXTAREA', 'SELECT']);

/** Translate one keyboard event into a queue action; true if handled. */
export function handleKey(event: KeyboardEvent, actions: KeyActions): boolean {
  const target = event.target as HTMLElement | null;
  if (target && (IGNORED_TAGS.has(target.tagName) || target.isContentEditable)) {
    return false;
  }
  if (event.ctrlKey || event.metaKey || event.altKey) {
    return false;
  }
  const key = event.key.toLowerCase();
  if (key in VERDICT_KEYS) {
    actions.verdict(VERDICT_KEYS[key]);
    return true;
  }
  if (key === 'o') {
    actions.cycleOverlay();
    return true;
  }
  if (event.key === 'ArrowRight' || event.key === 'ArrowDown') {
    actions.next();
    return true;
  }
  if (event.key === 'ArrowLeft' || event.key === 'ArrowUp') {
    actions.prev();
    return true;
  }
  return false;
}

export function bindKeys(window: Window, actions: KeyActions): () => void {
  const listener = (event: KeyboardEvent) => {
    if (handleKey(event, actions)) {
      event.preventDefault();
    }
  };
  window.addEventListener('keydown', listener);
  return () => window.removeEventListener('keydown', listener);
}
