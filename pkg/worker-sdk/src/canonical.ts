/**
 * Canonical JSON payload encoding.
 *
 * Object keys are sorted by their UTF-8 bytes, there is no insignificant
 * whitespace, and binary values travel as `{"$bytes": "<base64>"}`. The
 * `$bytes` key is reserved and rejected in user records. Numbers use the
 * engine's shortest round-trip form; note that JavaScript has a single
 * number type, so an integral float like 100.0 serializes as `100`.
 */

export const BYTES_TAG = "$bytes";

export type Payload =
  | null
  | boolean
  | number
  | string
  | Uint8Array
  | Payload[]
  | { [key: string]: Payload };

export class CanonicalizationError extends Error {}

function utf8Compare(a: string, b: string): number {
  return Buffer.compare(Buffer.from(a, "utf8"), Buffer.from(b, "utf8"));
}

function encodeValue(value: Payload): string {
  if (value === null) return "null";
  if (typeof value === "boolean") return value ? "true" : "false";
  if (typeof value === "number") {
    if (!Number.isFinite(value)) {
      throw new CanonicalizationError(`non-finite number ${value} is not encodable`);
    }
    return JSON.stringify(value);
  }
  if (typeof value === "string") return JSON.stringify(value);
  if (value instanceof Uint8Array) {
    const b64 = Buffer.from(value).toString("base64");
    return `{"$bytes":${JSON.stringify(b64)}}`;
  }
  if (Array.isArray(value)) {
    return `[${value.map(encodeValue).join(",")}]`;
  }
  if (typeof value === "object") {
    const keys = Object.keys(value).sort(utf8Compare);
    const parts: string[] = [];
    for (const key of keys) {
      if (key === BYTES_TAG) {
        throw new CanonicalizationError(`record key ${BYTES_TAG} is reserved`);
      }
      parts.push(`${JSON.stringify(key)}:${encodeValue(value[key])}`);
    }
    return `{${parts.join(",")}}`;
  }
  throw new CanonicalizationError(`unsupported payload type ${typeof value}`);
}

export function canonicalJson(value: Payload): Buffer {
  return Buffer.from(encodeValue(value), "utf8");
}

function untagBytes(value: unknown): Payload {
  if (Array.isArray(value)) return value.map(untagBytes);
  if (value !== null && typeof value === "object") {
    const entries = Object.entries(value as Record<string, unknown>);
    if (entries.length === 1 && entries[0][0] === BYTES_TAG && typeof entries[0][1] === "string") {
      return new Uint8Array(Buffer.from(entries[0][1], "base64"));
    }
    const out: { [key: string]: Payload } = {};
    for (const [key, item] of entries) out[key] = untagBytes(item);
    return out;
  }
  return value as Payload;
}

export function parseCanonical(data: Buffer | string): Payload {
  const text = typeof data === "string" ? data : data.toString("utf8");
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch (error) {
    throw new CanonicalizationError(`invalid payload JSON: ${error}`);
  }
  return untagBytes(raw);
}
