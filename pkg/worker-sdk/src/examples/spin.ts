/** Compute-bound servable: busy-loops argv[2] milliseconds per input item. */
import { serve } from "../serve";

const perItemMs = Number(process.argv[2] ?? "100");

void serve<null>({
  load: () => null,
  run: (_model, inputs) => {
    for (const _ of inputs) {
      const end = performance.now() + perItemMs;
      while (performance.now() < end) {
        // burn
      }
    }
    return [...inputs];
  },
});
