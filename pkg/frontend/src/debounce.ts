/** Trailing-edge debounce: the callback runs once the input settles. */
export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  delayMs = 150,
): { call: (...args: A) => void; cancel: () => void } {
  let timer: ReturnType<typeof setTimeout> | null = null;
  const call = (...args: A) => {
    if (timer) clearTimeout(timer);
    timer = setTimeout(() => {
      timer = null;
      fn(...args);
    }, delayMs);
  };
  const cancel = () => {
    if (timer) {
      clearTimeout(timer);
      timer = null;
    }
  };
  return { call, cancel };
}
