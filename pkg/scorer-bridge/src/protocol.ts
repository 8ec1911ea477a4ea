import { accessSync, constants } from "node:fs";
import { createInterface } from "node:readline";
import type { Readable, Writable } from "node:stream";

import type { ScorePair } from "./stub.js";

export interface TileRequest {
  tileId: string;
  path: string;
}

export interface ServeOptions {
  input: Readable;
  output: Writable;
  /** Maps one tile to its score pair; throwing yields an error response. */
  scorer: (tileId: string, path: string) => ScorePair;
  batchSize: number;
  /** Diagnostics sink; must never write to the protocol stream. */
  log?: (message: string) => void;
}

/**
 * Parse one request line.
 *
 * Throws on anything that is not a JSON object carrying string tile_id
 * and path fields.
 */
export function parseRequest(line: string): TileRequest {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch {
    throw new Error("not valid JSON");
  }
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new Error("request must be a JSON object");
  }
  const record = raw as Record<string, unknown>;
  const tileId = record["tile_id"];
  const path = record["path"];
  if (typeof tileId !== "string" || tileId === "") {
    throw new Error("tile_id must be a non-empty string");
  }
  if (typeof path !== "string" || path === "") {
    throw new Error("path must be a non-empty string");
  }
  return { tileId, path };
}

function writeChunk(output: Writable, chunk: string): Promise<void> {
  return new Promise((resolve, reject) => {
    output.write(chunk, (err) => (err ? reject(err) : resolve()));
  });
}

function responseLine(request: TileRequest, scorer: ServeOptions["scorer"]): string {
  try {
    // The readability check lives here, not in the scorer, so every
    // backend fails unreadable tiles the same way. The message embeds
    // only the request path to keep transcripts platform-independent.
    accessSync(request.path, constants.R_OK);
    const pair = scorer(request.tileId, request.path);
    return JSON.stringify({
      tile_id: request.tileId,
      target: pair.target,
      rest: pair.rest,
    });
  } catch (e) {
    const reason = e instanceof Error ? e.message : String(e);
    const message = reason.includes(request.path)
      ? `unreadable tile: ${request.path}`
      : reason;
    return JSON.stringify({ tile_id: request.tileId, error: message });
  }
}

/**
 * Run one scoring session over a line-delimited stream pair.
 *
 * Announces READY, answers every well-formed request with exactly one
 * response, and closes with DONE once the input ends. Requests are
 * buffered into batches; each batch is emitted sorted by tile id, so
 * responses may leave in a different order than they arrived. The peer
 * pairs them by tile_id, which the protocol allows.
 *
 * A tile that cannot be scored gets an error response and the session
 * carries on; only a broken stream aborts the loop. Malformed request
 * lines carry no usable tile_id to answer with, so they are logged and
 * dropped instead.
 */
export async function serve(options: ServeOptions): Promise<void> {
  const log = options.log ?? (() => {});
  await writeChunk(options.output, "READY\n");

  let batch: TileRequest[] = [];
  const flush = async () => {
    if (batch.length === 0) {
      return;
    }
    const ordered = [...batch].sort((a, b) =>
      a.tileId < b.tileId ? -1 : a.tileId > b.tileId ? 1 : 0,
    );
    const lines = ordered
      .map((request) => responseLine(request, options.scorer) + "\n")
      .join("");
    batch = [];
    await writeChunk(options.output, lines);
  };

  const reader = createInterface({ input: options.input, crlfDelay: Infinity });
  for await (const line of reader) {
    if (line.trim() === "") {
      continue;
    }
    let request: TileRequest;
    try {
      request = parseRequest(line);
    } catch (e) {
      log(`dropping malformed request line: ${(e as Error).message}`);
      continue;
    }
    batch.push(request);
    if (batch.length >= options.batchSize) {
      await flush();
    }
  }
  await flush();
  await writeChunk(options.output, "DONE\n");
}
