/** The baseline servable: answers "hello world" for every input. */
import { serve } from "../serve";

void serve<null>({
  load: () => null,
  run: (_model, inputs) => inputs.map(() => "hello world"),
});
