/* tslint:disable */
/* eslint-disable */

/**
 * Composites one ray through a Gaussian density bump: `samples` depths
 * spaced in inverse depth on `[near, far]`, density `peak * exp(-((z -
 * center) / width)^2 / 2)`. Returns rows `[z, sigma, T, w]` flattened,
 * followed by the composited depth and opacity.
 */
export function ray_profile(near: number, far: number, samples: number, center: number, width: number, peak: number): Float64Array;

/**
 * RGBA pixels of a `size x size` view of scene `seed` from a camera on the
 * arc at `angle_deg`, raised by `height`. With `depth` set, returns the
 * depth map in grey (near bright) instead of colour.
 */
export function render_view(seed: bigint, angle_deg: number, height: number, size: number, depth: boolean): Uint8Array;

/**
 * Builds the covisibility graph of `views` arc views of scene `seed` and
 * returns one line per view listing neighbours by inlier count.
 */
export function scene_graph(seed: bigint, views: number, size: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly ray_profile: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly render_view: (a: bigint, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly scene_graph: (a: bigint, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
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
