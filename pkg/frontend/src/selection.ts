/** Ranked selection state: first-click order is the rank, capped at three. */

export const MAX_RANKED = 3;

export type ToggleResult =
  | { kind: "added"; rank: number }
  | { kind: "removed" }
  | { kind: "rejected"; reason: string };

export class RankedSelection {
  private order: string[] = [];

  /** Ranked ids, rank 1 first. */
  get ranked(): string[] {
    return [...this.order];
  }

  get size(): number {
    return this.order.length;
  }

  /** 1-based rank of an id, or null when unselected. */
  rankOf(id: string): number | null {
    const at = this.order.indexOf(id);
    return at < 0 ? null : at + 1;
  }

  /**
   * Select or deselect one model. Deselecting closes the gap, so later
   * picks move up a rank. A fourth distinct pick is rejected unchanged.
   */
  toggle(id: string): ToggleResult {
    const at = this.order.indexOf(id);
    if (at >= 0) {
      this.order.splice(at, 1);
      return { kind: "removed" };
    }
    if (this.order.length >= MAX_RANKED) {
      return { kind: "rejected", reason: `already ranked ${MAX_RANKED} models; deselect one first` };
    }
    this.order.push(id);
    return { kind: "added", rank: this.order.length };
  }

  clear(): void {
    this.order = [];
  }
}
