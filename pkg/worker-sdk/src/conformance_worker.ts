/**
 * Conformance workload on top of the SDK: echoes its inputs, answers the
 * string "loads?" with the number of load() calls, and throws on "boom".
 */

import { Payload } from "./canonical";
import { serve } from "./serve";

let loads = 0;

void serve<null>({
  load: () => {
    loads += 1;
    return null;
  },
  run: (_model, inputs: Payload[]) =>
    inputs.map((value) => {
      if (value === "boom") throw new Error("boom");
      return value === "loads?" ? loads : value;
    }),
});
