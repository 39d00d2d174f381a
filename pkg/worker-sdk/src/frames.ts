/**
 * Length-prefixed frame codec for the worker socket.
 *
 * Wire layout: u32 big-endian length | kind byte | 16-byte UUID | body,
 * where length counts everything after the prefix. Frames longer than the
 * cap are a protocol violation and the connection must be dropped.
 */

export enum WorkerKind {
  PING = 0,
  PONG = 1,
  INVOKE = 2,
  INVOKE_BATCH = 3,
  OUTPUT = 4,
  ERROR = 5,
  SHUTDOWN = 6,
}

export const FRAME_CAP = 64 * 1024 * 1024;
const HEADER_LEN = 4;
const FIXED_LEN = 1 + 16;

export class ProtocolError extends Error {}

export interface Frame {
  kind: WorkerKind;
  correlationId: Buffer; // 16 bytes
  body: Buffer;
}

export function encodeFrame(frame: Frame, cap: number = FRAME_CAP): Buffer {
  if (frame.correlationId.length !== 16) {
    throw new ProtocolError(`correlation id must be 16 bytes, got ${frame.correlationId.length}`);
  }
  const length = FIXED_LEN + frame.body.length;
  if (length > cap) {
    throw new ProtocolError(`frame length ${length} exceeds cap ${cap}`);
  }
  const header = Buffer.alloc(HEADER_LEN + 1);
  header.writeUInt32BE(length, 0);
  header.writeUInt8(frame.kind, HEADER_LEN);
  return Buffer.concat([header, frame.correlationId, frame.body]);
}

export type DecodeResult =
  | { frame: Frame; consumed: number }
  | { needMore: number };

export function decodeFrame(data: Buffer, cap: number = FRAME_CAP): DecodeResult {
  if (data.length < HEADER_LEN) {
    return { needMore: HEADER_LEN - data.length };
  }
  const length = data.readUInt32BE(0);
  if (length > cap) {
    throw new ProtocolError(`frame length ${length} exceeds cap ${cap}`);
  }
  if (length < FIXED_LEN) {
    throw new ProtocolError(`frame length ${length} shorter than fixed header`);
  }
  const total = HEADER_LEN + length;
  if (data.length < total) {
    return { needMore: total - data.length };
  }
  const kindByte = data.readUInt8(HEADER_LEN);
  if (!(kindByte in WorkerKind)) {
    throw new ProtocolError(`unknown frame kind ${kindByte}`);
  }
  return {
    frame: {
      kind: kindByte as WorkerKind,
      correlationId: Buffer.from(data.subarray(HEADER_LEN + 1, HEADER_LEN + FIXED_LEN)),
      body: Buffer.from(data.subarray(HEADER_LEN + FIXED_LEN, total)),
    },
    consumed: total,
  };
}

/** Incremental decoder over a stream arriving in arbitrary chunks. */
export class FrameReader {
  private buffer: Buffer = Buffer.alloc(0);

  constructor(private readonly cap: number = FRAME_CAP) {}

  feed(chunk: Buffer): Frame[] {
    this.buffer = this.buffer.length === 0 ? chunk : Buffer.concat([this.buffer, chunk]);
    const frames: Frame[] = [];
    for (;;) {
      const result = decodeFrame(this.buffer, this.cap);
      if ("needMore" in result) break;
      frames.push(result.frame);
      this.buffer = this.buffer.subarray(result.consumed);
    }
    return frames;
  }
}
