/* tslint:disable */
/* eslint-disable */

/**
 * Simulates one scan with a smooth bump in the middle of an `n x n` grid,
 * fits the spatial model and returns a JSON object with the true field,
 * posterior mean, the excursion set at `gamma` and the one-sided
 * Bonferroni map, each row-major with `x` fastest.
 */
export function excursion_demo(n: number, amplitude: number, sigma2: number, gamma: number, alpha: number, seed: bigint): string;

/**
 * Amplitude regressor for blocks at `onsets` (s) lasting `durations` (s),
 * sampled every `tr` seconds with the default double-gamma response.
 */
export function hrf_regressor(onsets: Float64Array, durations: Float64Array, tr: number, n_volumes: number): Float64Array;

/**
 * One draw from the SPDE prior on an `n x n` unit-spaced grid, row-major
 * with `x` fastest.
 */
export function sample_field(n: number, kappa: number, tau: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly excursion_demo: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly hrf_regressor: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly sample_field: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
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
