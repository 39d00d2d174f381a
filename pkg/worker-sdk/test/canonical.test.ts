import { describe, expect, it } from "vitest";

import { CanonicalizationError, canonicalJson, parseCanonical } from "../src/canonical";
import { loadGoldenFrames } from "./fixture";

describe("canonical encoding", () => {
  it("sorts object keys and drops whitespace", () => {
    expect(canonicalJson({ b: [1, 2], a: { y: 1, x: 2 } }).toString()).toBe(
      '{"a":{"x":2,"y":1},"b":[1,2]}'
    );
  });

  it("orders keys by UTF-8 bytes", () => {
    // "é" (0xc3 0xa9) sorts after "z" (0x7a) in byte order
    expect(canonicalJson({ "é": 1, z: 2 }).toString()).toBe('{"z":2,"é":1}');
  });

  it("tags bytes as base64 and round-trips them", () => {
    const value = new Uint8Array([0, 1, 254, 255]);
    const encoded = canonicalJson(value);
    expect(encoded.toString()).toBe('{"$bytes":"AAH+/w=="}');
    expect(parseCanonical(encoded)).toEqual(value);
  });

  it("rejects the reserved $bytes record key", () => {
    expect(() => canonicalJson({ $bytes: "not bytes" })).toThrow(CanonicalizationError);
  });

  it("rejects non-finite numbers", () => {
    expect(() => canonicalJson(Number.NaN)).toThrow(CanonicalizationError);
    expect(() => canonicalJson(Infinity)).toThrow(CanonicalizationError);
  });

  it("re-encodes every golden body identically", () => {
    // cross-language stability: the fixture bodies were produced by another
    // implementation and must survive a parse/encode round trip bit-for-bit
    for (const entry of loadGoldenFrames()) {
      if (!entry.body_utf8) continue;
      const body = Buffer.from(entry.body_utf8, "utf8");
      expect(canonicalJson(parseCanonical(body)).equals(body), entry.name).toBe(true);
    }
  });

  it("round-trips nested structures", () => {
    const value = {
      list: [1, "two", null, false, 2.5],
      blob: new Uint8Array([7, 8, 9]),
      inner: { deep: { deeper: "ok" } },
    };
    expect(parseCanonical(canonicalJson(value))).toEqual(value);
  });
});
