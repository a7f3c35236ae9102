/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_convcomparison_free: (a: number, b: number) => void;
export const __wbg_get_convcomparison_fast_calls: (a: number) => number;
export const __wbg_get_convcomparison_fast_ms: (a: number) => number;
export const __wbg_get_convcomparison_max_abs_diff: (a: number) => number;
export const __wbg_get_convcomparison_sliced_calls: (a: number) => number;
export const __wbg_get_convcomparison_sliced_ms: (a: number) => number;
export const __wbg_matchresult_free: (a: number, b: number) => void;
export const __wbg_set_convcomparison_fast_calls: (a: number, b: number) => void;
export const __wbg_set_convcomparison_fast_ms: (a: number, b: number) => void;
export const __wbg_set_convcomparison_max_abs_diff: (a: number, b: number) => void;
export const __wbg_set_convcomparison_sliced_calls: (a: number, b: number) => void;
export const __wbg_set_convcomparison_sliced_ms: (a: number, b: number) => void;
export const compare_conv: (a: number, b: number, c: number) => [number, number, number];
export const kernel_dump: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const match_pair: (a: number, b: number, c: number) => [number, number, number];
export const matchresult_mean_error: (a: number) => number;
export const matchresult_predicted_points: (a: number) => [number, number];
export const matchresult_size: (a: number) => number;
export const matchresult_source: (a: number) => [number, number];
export const matchresult_source_points: (a: number) => [number, number];
export const matchresult_target: (a: number) => [number, number];
export const matchresult_truth_points: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
