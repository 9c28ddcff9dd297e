/* tslint:disable */
/* eslint-disable */

/**
 * Window means of `5 sin²` fitted by the aggregated GP and by a GP on the
 * window centres.
 */
export function aggregate_vs_center(window: number, lengthscale: number, seed: number): string;

/**
 * Mixture weights of two experts whose predictive variance is low near
 * their own centre and grows with distance.
 */
export function mixture_weights(center_a: number, center_b: number, width: number, tanh: boolean): string;

/**
 * Dependent pair: posterior band under likelihood weight `phi`, next to the
 * untempered band.
 */
export function tempered_posterior(phi: number, lengthscale: number, noise: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly aggregate_vs_center: (a: number, b: number, c: number) => [number, number];
    readonly mixture_weights: (a: number, b: number, c: number, d: number) => [number, number];
    readonly tempered_posterior: (a: number, b: number, c: number, d: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
