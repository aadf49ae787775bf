/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_timeline_free: (a: number, b: number) => void;
export const timeline_apply: (a: number, b: number, c: number, d: number) => [number, number, number];
export const timeline_change_rgba: (a: number) => [number, number];
export const timeline_changed: (a: number) => number;
export const timeline_contour_counts: (a: number, b: number, c: number) => [number, number, number, number];
export const timeline_contour_preview: (a: number, b: number, c: number) => [number, number, number, number];
export const timeline_events: (a: number) => number;
export const timeline_foreground: (a: number) => number;
export const timeline_height: (a: number) => number;
export const timeline_image_rgba: (a: number) => [number, number];
export const timeline_mask_rgba: (a: number) => [number, number];
export const timeline_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const timeline_previous_rgba: (a: number) => [number, number];
export const timeline_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
