import type { SampleView } from './api';

export const OVERLAY_MODES = ['rgb', 'overlay', 'mask', 'depth'] as const;
export type OverlayMode = (typeof OVERLAY_MODES)[number];

export function nextMode(mode: OverlayMode): OverlayMode {
  const index = OVERLAY_MODES.indexOf(mode);
  return OVERLAY_MODES[(index + 1) % OVERLAY_MODES.length];
}

/** Asset URL for a sample under the given display mode.
 *
 * The mask view reuses the overlay endpoint at full alpha, which renders
 * the mask as a solid tint over the image.
 */
export function assetUrl(sample: SampleView, mode: OverlayMode): string {
  switch (mode) {
    case 'rgb':
      return sample.image_url;
    case 'overlay':
      return sample.overlay_url;
    case 'mask':
      return `${sample.overlay_url}?alpha=1`;
    case 'depth':
      return sample.depth_url;
  }
}

export function prefetchUrls(samples: SampleView[], mode: OverlayMode): string[] {
  return samples.map((s) => assetUrl(s, mode));
}
