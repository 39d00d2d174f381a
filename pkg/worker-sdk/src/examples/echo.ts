/** Identity servable: returns its inputs unchanged. */
import { serve } from "../serve";

void serve<null>({
  load: () => null,
  run: (_model, inputs) => [...inputs],
});
