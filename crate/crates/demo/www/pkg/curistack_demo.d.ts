/* tslint:disable */
/* eslint-disable */

export class Sandbox {
    free(): void;
    [Symbol.dispose](): void;
    constructor(n_blocks: number, stage: number, seed: bigint);
    reset(): string;
    /**
     * One step of the hand-written pick-and-place controller.
     */
    scripted_step(): string;
    /**
     * Applies a manual action; components are clipped to [-1, 1].
     */
    step(dx: number, dy: number, dz: number, claw: number): string;
    view_json(): string;
}

export function popartProbe(target_mean: number, target_scale: number, updates: number, step_size: number, seed: bigint): string;

export function relabelStats(mode: string, augment_prob: number, n_blocks: number, samples: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_sandbox_free: (a: number, b: number) => void;
    readonly popartProbe: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly relabelStats: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly sandbox_new: (a: number, b: number, c: bigint) => [number, number, number];
    readonly sandbox_reset: (a: number) => [number, number];
    readonly sandbox_scripted_step: (a: number) => [number, number];
    readonly sandbox_step: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly sandbox_view_json: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
