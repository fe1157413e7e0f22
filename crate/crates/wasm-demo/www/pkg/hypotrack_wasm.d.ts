/* tslint:disable */
/* eslint-disable */

/**
 * Hypothesis pool size after each growth step of the first batch, per pruning mode.
 */
export function growth_curves(persons: number, frames: number, seed: bigint, keep: number, cutoff: number): string;

/**
 * IoU of two `(left, top, width, height)` boxes, before and after shifting the first by `shift`.
 */
export function overlap(a: Float64Array, b: Float64Array, shift: Float64Array): string;

/**
 * Synthesizes a scene, tracks it with the IoU heuristic scorer and scores the result.
 */
export function synth_and_track(persons: number, frames: number, crossing: boolean, miss_rate: number, seed: bigint, c_score: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly growth_curves: (a: number, b: number, c: bigint, d: number, e: number) => [number, number, number, number];
    readonly overlap: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly synth_and_track: (a: number, b: number, c: number, d: number, e: bigint, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
