import { describe, expect, it } from "vitest";

import { ApiError, HarnessApi, parseSseChunk } from "../src/api.js";

interface Recorded {
  url: string;
  method?: string;
  body?: string;
  headers?: Record<string, string>;
}

function stubFetch(status = 200, payload: unknown = {}) {
  const calls: Recorded[] = [];
  const impl = async (url: string, init?: RequestInit) => {
    calls.push({
      url,
      method: init?.method,
      body: init?.body as string | undefined,
      headers: init?.headers as Record<string, string>,
    });
    return new Response(JSON.stringify(payload), { status });
  };
  return { calls, impl };
}

describe("HarnessApi", () => {
  it("posts key annotations with the client timestamp", async () => {
    const { calls, impl } = stubFetch(200, { annotation: {}, time_substituted: false });
    const api = new HarnessApi("http://h", null, impl);
    await api.postKeyAnnotation("run-1", "1", 1234);
    expect(calls[0].url).toBe("http://h/runs/run-1/annotations");
    expect(calls[0].method).toBe("POST");
    expect(JSON.parse(calls[0].body!)).toEqual({ key: "1", event_time: 1234 });
  });

  it("serializes filters into query parameters", async () => {
    const { calls, impl } = stubFetch(200, { annotations: [] });
    const api = new HarnessApi("", null, impl);
    await api.getAnnotations("run-1", {
      kinds: ["correct", "voice"], fromMs: 100, toMs: 900, q: "neck",
    });
    const url = new URL("http://x" + calls[0].url);
    expect(url.pathname).toBe("/runs/run-1/annotations");
    expect(url.searchParams.get("kinds")).toBe("correct,voice");
    expect(url.searchParams.get("from_ms")).toBe("100");
    expect(url.searchParams.get("to_ms")).toBe("900");
    expect(url.searchParams.get("q")).toBe("neck");
  });

  it("sends the bearer token and appends it to media urls", async () => {
    const { calls, impl } = stubFetch();
    const api = new HarnessApi("", "sekrit", impl);
    await api.getStats("run-1");
    expect((calls[0].headers as any)["authorization"]).toBe("Bearer sekrit");
    expect(api.streamUrl("fpv")).toBe("/streams/fpv.mjpeg?token=sekrit");
  });

  it("raises ApiError with the server status", async () => {
    const { impl } = stubFetch(409, { detail: "conflict" });
    const api = new HarnessApi("", null, impl);
    await expect(api.stopRun("run-1")).rejects.toThrowError(ApiError);
    await expect(api.stopRun("run-1")).rejects.toMatchObject({ status: 409 });
  });

  it("frame urls clamp negative offsets to zero", () => {
    const api = new HarnessApi("");
    expect(api.frameUrl("run-1", -500)).toContain("offset=0");
    expect(api.frameUrl("run-1", 2500, "tpv")).toContain("stream=tpv");
  });
});

describe("parseSseChunk", () => {
  it("extracts data lines and skips keepalives", () => {
    const chunk =
      ': keepalive\n\n' +
      'id: 1\ndata: {"seq":1,"type":"stats","run_id":"r","data":{},"server_time":5}\n\n' +
      'id: 2\ndata: {"seq":2,"type":"annotation","run_id":"r","data":{},"server_time":6}\n\n';
    const events = parseSseChunk(chunk);
    expect(events.map((e) => e.seq)).toEqual([1, 2]);
    expect(events[1].type).toBe("annotation");
  });

  it("tolerates malformed lines", () => {
    expect(parseSseChunk("data: {nope\n\n")).toEqual([]);
  });
});
