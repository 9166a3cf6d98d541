/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    beta(t: number): number;
    /**
     * New defect shape and appearance.
     */
    draw(seed: number): void;
    forward_rgba(t: number): Uint8Array;
    fused_rgba(lambda: number, kernel: number): Uint8Array;
    mask_rgba(): Uint8Array;
    constructor(size: number, seed: number);
    reverse_rgba(done: number): Uint8Array;
    score(lambda: number, kernel: number): number;
    /**
     * `shape` is `linear`, `quadratic` or `root`.
     */
    set_schedule(shape: string, steps: number): void;
    size(): number;
    steps(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_beta: (a: number, b: number) => [number, number, number];
    readonly demo_draw: (a: number, b: number) => [number, number];
    readonly demo_forward_rgba: (a: number, b: number) => [number, number, number, number];
    readonly demo_fused_rgba: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_mask_rgba: (a: number) => [number, number];
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_reverse_rgba: (a: number, b: number) => [number, number, number, number];
    readonly demo_score: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_set_schedule: (a: number, b: number, c: number, d: number) => [number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_steps: (a: number) => number;
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
