/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    anchors(): number;
    iteration(): number;
    iterations(): number;
    /**
     * Total loss of the latest iteration (NaN before the first).
     */
    loss(): number;
    mesh(resolution: number): string;
    constructor(scene: string, resolution: number, views: number, iterations: number, seed: bigint);
    /**
     * RGBA pixels of `view`; `layer` is truth, render, depth or normal.
     */
    render(view: number, layer: string): Uint8Array;
    size(): number;
    /**
     * Trains `n` more iterations; returns the iteration count.
     */
    step(n: number): number;
    views(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_anchors: (a: number) => number;
    readonly demo_iteration: (a: number) => number;
    readonly demo_iterations: (a: number) => number;
    readonly demo_loss: (a: number) => number;
    readonly demo_mesh: (a: number, b: number) => [number, number, number, number];
    readonly demo_new: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
    readonly demo_render: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_step: (a: number, b: number) => [number, number, number];
    readonly demo_views: (a: number) => number;
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
