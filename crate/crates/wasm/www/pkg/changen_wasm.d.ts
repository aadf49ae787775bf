/* tslint:disable */
/* eslint-disable */

/**
 * A scene and its event history.
 */
export class Timeline {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Applies a `create`, `remove` or `edit` event; returns the number of changed pixels.
     */
    apply(kind: string, probability: number): number;
    change_rgba(): Uint8Array;
    changed(): number;
    /**
     * `[disagreeing pixels, erase-update pixels inside the dilated change]`.
     */
    contour_counts(probability: number, radius: number): Uint32Array;
    /**
     * Removes objects from the contour view of the current scene without
     * changing it; returns RGBA of the comparison: white where both updates
     * keep a contour, red where only the naive recomputation does, blue for
     * the dilated change.
     */
    contour_preview(probability: number, radius: number): Uint8Array;
    events(): number;
    foreground(): number;
    height(): number;
    image_rgba(): Uint8Array;
    mask_rgba(): Uint8Array;
    constructor(seed: number, size: number, classes: number, shapes: string);
    previous_rgba(): Uint8Array;
    width(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_timeline_free: (a: number, b: number) => void;
    readonly timeline_apply: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly timeline_change_rgba: (a: number) => [number, number];
    readonly timeline_changed: (a: number) => number;
    readonly timeline_contour_counts: (a: number, b: number, c: number) => [number, number, number, number];
    readonly timeline_contour_preview: (a: number, b: number, c: number) => [number, number, number, number];
    readonly timeline_events: (a: number) => number;
    readonly timeline_foreground: (a: number) => number;
    readonly timeline_height: (a: number) => number;
    readonly timeline_image_rgba: (a: number) => [number, number];
    readonly timeline_mask_rgba: (a: number) => [number, number];
    readonly timeline_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly timeline_previous_rgba: (a: number) => [number, number];
    readonly timeline_width: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
