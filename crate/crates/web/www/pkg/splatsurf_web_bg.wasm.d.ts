/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_anchors: (a: number) => number;
export const demo_iteration: (a: number) => number;
export const demo_iterations: (a: number) => number;
export const demo_loss: (a: number) => number;
export const demo_mesh: (a: number, b: number) => [number, number, number, number];
export const demo_new: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number];
export const demo_render: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_size: (a: number) => number;
export const demo_step: (a: number, b: number) => [number, number, number];
export const demo_views: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
