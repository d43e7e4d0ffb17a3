/* tslint:disable */
/* eslint-disable */

/**
 * Exact-distance masks `U_0..U_H`, walk-count topologies and BFS distances
 * of a generated graph. `kind` is `path`, `cycle`, `star` or `random`.
 */
export function distanceMasks(kind: string, nodes: number, density: number, hops: number, seed: number): string;

/**
 * Finite-difference check of the small end-to-end model.
 */
export function gradientCheck(mode: string, seed: number): string;

/**
 * One pooling step with random weights on a random graph.
 */
export function poolRandomGraph(nodes: number, density: number, clusters: number, mode: string, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly distanceMasks: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly gradientCheck: (a: number, b: number, c: number) => [number, number];
    readonly poolRandomGraph: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
