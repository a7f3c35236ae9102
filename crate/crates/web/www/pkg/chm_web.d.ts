/* tslint:disable */
/* eslint-disable */

export class ConvComparison {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    fast_calls: number;
    fast_ms: number;
    max_abs_diff: number;
    sliced_calls: number;
    sliced_ms: number;
}

export class MatchResult {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Mean distance between predicted and true target points, pixels.
     */
    mean_error(): number;
    predicted_points(): Float64Array;
    source(): Uint8Array;
    source_points(): Float64Array;
    target(): Uint8Array;
    truth_points(): Float64Array;
    readonly size: number;
}

/**
 * Rank-4 convolution of a random `size^4` input with a `kernel^4` kernel
 * by the folded and the per-slice routes.
 */
export function compare_conv(size: number, kernel: number, seed: number): ConvComparison;

/**
 * Text dump of a delta-initialized shared kernel. The second header line
 * holds the class count.
 */
export function kernel_dump(rank: number, spatial: number, scale: number, scheme: string, dense: boolean): string;

/**
 * Generates synthetic pair `seed` and transfers its keypoints with the
 * trained desk model or an identity-initialized one.
 */
export function match_pair(seed: number, trained: boolean, clutter: number): MatchResult;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_convcomparison_free: (a: number, b: number) => void;
    readonly __wbg_get_convcomparison_fast_calls: (a: number) => number;
    readonly __wbg_get_convcomparison_fast_ms: (a: number) => number;
    readonly __wbg_get_convcomparison_max_abs_diff: (a: number) => number;
    readonly __wbg_get_convcomparison_sliced_calls: (a: number) => number;
    readonly __wbg_get_convcomparison_sliced_ms: (a: number) => number;
    readonly __wbg_matchresult_free: (a: number, b: number) => void;
    readonly __wbg_set_convcomparison_fast_calls: (a: number, b: number) => void;
    readonly __wbg_set_convcomparison_fast_ms: (a: number, b: number) => void;
    readonly __wbg_set_convcomparison_max_abs_diff: (a: number, b: number) => void;
    readonly __wbg_set_convcomparison_sliced_calls: (a: number, b: number) => void;
    readonly __wbg_set_convcomparison_sliced_ms: (a: number, b: number) => void;
    readonly compare_conv: (a: number, b: number, c: number) => [number, number, number];
    readonly kernel_dump: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly match_pair: (a: number, b: number, c: number) => [number, number, number];
    readonly matchresult_mean_error: (a: number) => number;
    readonly matchresult_predicted_points: (a: number) => [number, number];
    readonly matchresult_size: (a: number) => number;
    readonly matchresult_source: (a: number) => [number, number];
    readonly matchresult_source_points: (a: number) => [number, number];
    readonly matchresult_target: (a: number) => [number, number];
    readonly matchresult_truth_points: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
