/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_wasmframe_free: (a: number, b: number) => void;
export const roc: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const stain_normalize: (a: number, b: number, c: number) => [number, number, number];
export const synth_tiles: (a: number, b: number, c: number) => [number, number, number];
export const wasmframe_height: (a: number) => number;
export const wasmframe_rgba: (a: number) => [number, number];
export const wasmframe_summary: (a: number) => [number, number];
export const wasmframe_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
