/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const aggregate_vs_center: (a: number, b: number, c: number) => [number, number];
export const mixture_weights: (a: number, b: number, c: number, d: number) => [number, number];
export const tempered_posterior: (a: number, b: number, c: number, d: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
