export { BYTES_TAG, CanonicalizationError, canonicalJson, parseCanonical } from "./canonical";
export type { Payload } from "./canonical";
export { FRAME_CAP, FrameReader, ProtocolError, WorkerKind, decodeFrame, encodeFrame } from "./frames";
export type { DecodeResult, Frame } from "./frames";
export { serve } from "./serve";
export type { ServableEntry } from "./serve";
