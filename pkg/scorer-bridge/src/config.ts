import { parseArgs } from "node:util";

export const DEFAULT_BATCH_SIZE = 32;

export interface BridgeConfig {
  /** Where scores come from. Only the built-in stub is bundled. */
  modelSource: "stub";
  /** Echoed into every score so downstream tables can tell scorers apart. */
  classifierId: string;
  /** Requests buffered before a batch is scored and flushed. */
  batchSize: number;
  /** Recorded for file-backed runtimes; the stub ignores it. */
  deviceHint: string;
}

export class UsageError extends Error {}

export const USAGE =
  "usage: scorer-bridge --stub [--classifier <id>] [--batch <n>] [--device <hint>]";

/**
 * Parse command line arguments into a BridgeConfig.
 *
 * Throws UsageError on anything invalid. Callers report the message on
 * stderr and exit nonzero before the protocol announces READY, so a
 * misconfigured bridge fails the session instead of scoring with the
 * wrong settings.
 */
export function parseBridgeArgs(argv: string[]): BridgeConfig {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      options: {
        stub: { type: "boolean", default: false },
        model: { type: "string" },
        classifier: { type: "string", default: "stub" },
        batch: { type: "string", default: String(DEFAULT_BATCH_SIZE) },
        device: { type: "string", default: "cpu" },
      },
      strict: true,
      allowPositionals: false,
    });
  } catch (e) {
    throw new UsageError(`${(e as Error).message}\n${USAGE}`);
  }
  const values = parsed.values;

  if (values.model !== undefined) {
    throw new UsageError(
      "file-backed models are not bundled with this bridge; run with --stub",
    );
  }
  if (!values.stub) {
    throw new UsageError(`a model source is required\n${USAGE}`);
  }

  const batchSize = Number(values.batch);
  if (!Number.isInteger(batchSize) || batchSize < 1) {
    throw new UsageError(`--batch must be an integer >= 1, got ${values.batch}`);
  }
  if (values.classifier === "") {
    throw new UsageError("--classifier must not be empty");
  }

  return {
    modelSource: "stub",
    classifierId: values.classifier,
    batchSize,
    deviceHint: values.device,
  };
}
