import { parseBridgeArgs, UsageError } from "./config.js";
import { serve } from "./protocol.js";
import { stubScore } from "./stub.js";

async function main() {
  let config;
  try {
    config = parseBridgeArgs(process.argv.slice(2));
  } catch (e) {
    if (e instanceof UsageError) {
      console.error(e.message);
      process.exit(1);
    }
    throw e;
  }

  // Configuration failures above exit before READY is announced, so the
  // peer sees a protocol violation instead of silently wrong scores.
  await serve({
    input: process.stdin,
    output: process.stdout,
    scorer: (tileId) => stubScore(config.classifierId, tileId),
    batchSize: config.batchSize,
    log: (message) => console.error(`scorer-bridge: ${message}`),
  });
}

main().catch((e) => {
  console.error(e);
  process.exit(1);
});
