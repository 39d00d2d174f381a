/** Fixed-cost servable: waits argv[2] milliseconds once per call, then echoes. */
import { serve } from "../serve";

const delayMs = Number(process.argv[2] ?? "100");

void serve<null>({
  load: () => null,
  run: async (_model, inputs) => {
    await new Promise((resolve) => setTimeout(resolve, delayMs));
    return [...inputs];
  },
});
