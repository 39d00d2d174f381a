/**
 * The worker loop: turns a load/run pair into a conforming worker process.
 *
 * `load` runs exactly once, before the socket connection, so the worker
 * only becomes reachable after its model is up; a load failure exits
 * non-zero before the supervisor ever sees a PONG. `run` receives the
 * whole input batch and must return one output per input. Exceptions are
 * reported as ERROR frames without killing the process, and the measured
 * inference time covers the run call only, not decoding or encoding.
 */

import * as net from "node:net";
import { performance } from "node:perf_hooks";

import { canonicalJson, parseCanonical, Payload } from "./canonical";
import { encodeFrame, Frame, FrameReader, ProtocolError, WorkerKind } from "./frames";

export interface ServableEntry<Model = unknown> {
  /** Invoked once at startup; its return value is passed to every run call. */
  load: () => Model | Promise<Model>;
  /** Batch handler: one output per input, in order. */
  run: (model: Model, inputs: Payload[]) => Payload[] | Promise<Payload[]>;
}

function reply(socket: net.Socket, kind: WorkerKind, correlationId: Buffer, payload?: Payload): void {
  const body = payload === undefined ? Buffer.alloc(0) : canonicalJson(payload);
  socket.write(encodeFrame({ kind, correlationId, body }));
}

function errorText(error: unknown): string {
  if (error instanceof Error) return error.stack ?? `${error.name}: ${error.message}`;
  return String(error);
}

export async function serve<Model>(entry: ServableEntry<Model>, socketPath?: string): Promise<void> {
  const path = socketPath ?? process.env.SERVEHUB_SOCKET;
  if (!path) {
    throw new Error("SERVEHUB_SOCKET is not set");
  }
  const model = await entry.load();

  const socket = net.connect(path);
  await new Promise<void>((resolve, reject) => {
    socket.once("connect", () => resolve());
    socket.once("error", reject);
  });
  socket.on("error", () => process.exit(0)); // supervisor went away

  const reader = new FrameReader();
  const pending: Frame[] = [];
  let busy = false;

  const handle = async (frame: Frame): Promise<void> => {
    switch (frame.kind) {
      case WorkerKind.PING:
        reply(socket, WorkerKind.PONG, frame.correlationId);
        return;
      case WorkerKind.INVOKE:
      case WorkerKind.INVOKE_BATCH: {
        try {
          const payload = parseCanonical(frame.body) as { inputs: Payload[] };
          const inputs = payload.inputs;
          const started = performance.now();
          const outputs = await entry.run(model, inputs);
          const inferenceMs = performance.now() - started;
          if (!Array.isArray(outputs) || outputs.length !== inputs.length) {
            throw new Error(
              `run returned ${outputs?.length ?? "no"} outputs for ${inputs.length} inputs`
            );
          }
          reply(socket, WorkerKind.OUTPUT, frame.correlationId, {
            outputs,
            inference_ms: inferenceMs,
          });
        } catch (error) {
          reply(socket, WorkerKind.ERROR, frame.correlationId, { message: errorText(error) });
        }
        return;
      }
      case WorkerKind.SHUTDOWN:
        socket.end();
        process.exit(0);
      default:
        // PONG/OUTPUT/ERROR arriving at a worker is a supervisor bug
        console.error(`unexpected frame kind ${frame.kind}`);
        process.exit(2);
    }
  };

  const pump = async (): Promise<void> => {
    if (busy) return;
    busy = true;
    try {
      while (pending.length > 0) {
        await handle(pending.shift()!); // one invocation in flight at a time
      }
    } finally {
      busy = false;
    }
  };

  socket.on("data", (chunk: Buffer) => {
    let frames: Frame[];
    try {
      frames = reader.feed(chunk);
    } catch (error) {
      console.error(error instanceof ProtocolError ? error.message : errorText(error));
      process.exit(2);
    }
    pending.push(...frames);
    void pump();
  });

  await new Promise<void>((resolve) => socket.once("close", () => resolve()));
}
