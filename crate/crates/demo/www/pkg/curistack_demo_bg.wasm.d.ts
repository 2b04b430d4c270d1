/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_sandbox_free: (a: number, b: number) => void;
export const popartProbe: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
export const relabelStats: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
export const sandbox_new: (a: number, b: number, c: bigint) => [number, number, number];
export const sandbox_reset: (a: number) => [number, number];
export const sandbox_scripted_step: (a: number) => [number, number];
export const sandbox_step: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const sandbox_view_json: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
