import { createHash } from "node:crypto";

/** Scores are quantized to this many decimal places before emission. */
const DECIMALS = 1e6;

/**
 * Deterministic stand-in for a real model: hash the classifier id and
 * tile id into the unit interval.
 *
 * The first 13 hex digits of sha256(`${classifierId}|${tileId}`) give a
 * 52-bit integer, which a double represents exactly, divided by 2^52.
 * Every step is exact IEEE arithmetic, so any runtime that follows the
 * same recipe reproduces the value bit for bit.
 */
export function unitScore(classifierId: string, tileId: string): number {
  const hex = createHash("sha256")
    .update(`${classifierId}|${tileId}`, "utf8")
    .digest("hex");
  return parseInt(hex.slice(0, 13), 16) / 2 ** 52;
}

export interface ScorePair {
  target: number;
  rest: number;
}

/**
 * Emit a two-way probability for one tile.
 *
 * target is unitScore floored to six decimals; rest is the decimal
 * complement built from the same integer numerator, so both values
 * serialize as clean six-decimal strings and the pair sums to 1 within
 * one floating point ulp.
 */
export function stubScore(classifierId: string, tileId: string): ScorePair {
  const millionths = Math.floor(unitScore(classifierId, tileId) * DECIMALS);
  return { target: millionths / DECIMALS, rest: (DECIMALS - millionths) / DECIMALS };
}
