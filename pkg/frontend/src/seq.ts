/**
 * Request-sequence gate: responses for superseded requests are discarded so
 * the display always reflects the newest input state.
 */
export class LatestGate {
  private issued = 0;
  private applied = 0;

  /** Reserve a sequence number for a request about to be sent. */
  next(): number {
    this.issued += 1;
    return this.issued;
  }

  /** True when a response with this number is still the newest seen. */
  accept(seq: number): boolean {
    if (seq <= this.applied) return false;
    this.applied = seq;
    return true;
  }

  get pending(): boolean {
    return this.issued > this.applied;
  }
}
