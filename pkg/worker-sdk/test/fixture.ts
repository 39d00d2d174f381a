import { readFileSync } from "node:fs";
import { join } from "node:path";

export interface GoldenFrame {
  name: string;
  channel: "worker" | "queue";
  kind: string;
  kind_byte: number;
  correlation_id: string;
  body_utf8: string;
  frame_hex: string;
}

export function loadGoldenFrames(): GoldenFrame[] {
  const path = join(__dirname, "..", "..", "conformance", "golden_frames.json");
  return JSON.parse(readFileSync(path, "utf8")).frames as GoldenFrame[];
}

export function correlationBytes(uuid: string): Buffer {
  return Buffer.from(uuid.replace(/-/g, ""), "hex");
}
