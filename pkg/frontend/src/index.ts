/** Public surface of the viewer package. */

export * from './types.js';
export * from './rle.js';
export * from './raster.js';
export * from './state.js';
export * from './api.js';
export * from './viewer.js';
