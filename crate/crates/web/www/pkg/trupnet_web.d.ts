/* tslint:disable */
/* eslint-disable */

export function grid_rgba(h: number, w: number, seed: number): Uint8Array;

export function shift_metrics(size: number, seed: number, dx: number, dy: number): Float64Array;

/**
 * RGBA of the shifted-mask comparison: green true positive, red false
 * positive, blue false negative.
 */
export function shift_rgba(size: number, seed: number, dx: number, dy: number): Uint8Array;

export function synth_rgba(size: number, seed: number, overlay: boolean): Uint8Array;

export function upsample_rgba(h: number, w: number, out_h: number, out_w: number, seed: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly grid_rgba: (a: number, b: number, c: number) => [number, number];
    readonly shift_metrics: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly shift_rgba: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly synth_rgba: (a: number, b: number, c: number) => [number, number, number, number];
    readonly upsample_rgba: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
