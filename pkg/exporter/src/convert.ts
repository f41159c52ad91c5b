/**
 * Keras layer graph -> bwnet manifest conversion.
 *
 * Tracks the channels_last activation shape through the stack, permutes
 * conv kernels from (kh, kw, in, out) to (out, in, kh, kw), transposes
 * dense kernels to (out, in), and reindexes the first dense layer after a
 * flatten from (h, w, c) feature order to (c, h, w). Values are moved, never
 * recomputed, so each exported element is bit-identical to its source.
 */

import { Dtype } from './format';
import { KerasLayer, TfjsModel, UnsupportedLayerError, weightFor } from './tfjs';

export interface LayerEntry {
  kind: string;
  name?: string;
  in_channels?: number;
  out_channels?: number;
  kernel?: number[];
  stride?: number;
  pad?: number;
  in_features?: number;
  out_features?: number;
  channels?: number;
  pool?: number;
  weight_ref?: string;
  stats_ref?: string;
}

export interface TensorOut {
  fileName: string;
  dtype: Dtype;
  dims: number[];
  data: Float32Array;
}

export interface Converted {
  inputShape: number[]; // (c, h, w)
  layers: LayerEntry[];
  tensors: TensorOut[];
}

interface Shape {
  h: number;
  w: number;
  c: number;
  flat: boolean;
}

function layerName(layer: KerasLayer, index: number): string {
  return (layer.config?.name as string) ?? `layer_${index}`;
}

function asPair(value: any): [number, number] {
  if (Array.isArray(value)) {
    return [value[0], value[1] ?? value[0]];
  }
  return [value, value];
}

function requireNoBias(layer: KerasLayer, name: string): void {
  if (layer.config.use_bias) {
    throw new UnsupportedLayerError(name, 'bias terms are not supported; fold them into BatchNorm');
  }
}

/** (kh, kw, in, out) -> (out, in, kh, kw), values moved verbatim. */
export function permuteConvKernel(data: Float32Array, kh: number, kw: number,
                                  cin: number, cout: number): Float32Array {
  const out = new Float32Array(data.length);
  for (let i = 0; i < kh; i++) {
    for (let j = 0; j < kw; j++) {
      for (let a = 0; a < cin; a++) {
        for (let b = 0; b < cout; b++) {
          const src = ((i * kw + j) * cin + a) * cout + b;
          const dst = ((b * cin + a) * kh + i) * kw + j;
          out[dst] = data[src];
        }
      }
    }
  }
  return out;
}

/** Dense (in, out) -> (out, in); rows optionally remapped channels_last -> channels_first. */
export function permuteDenseKernel(data: Float32Array, nIn: number, nOut: number,
                                   preFlatten?: { h: number; w: number; c: number }): Float32Array {
  const rowMap = new Array<number>(nIn);
  if (preFlatten) {
    const { h, w, c } = preFlatten;
    for (let i = 0; i < h; i++) {
      for (let j = 0; j < w; j++) {
        for (let k = 0; k < c; k++) {
          rowMap[(k * h + i) * w + j] = (i * w + j) * c + k;
        }
      }
    }
  } else {
    for (let i = 0; i < nIn; i++) rowMap[i] = i;
  }
  const out = new Float32Array(data.length);
  for (let o = 0; o < nOut; o++) {
    for (let i = 0; i < nIn; i++) {
      out[o * nIn + i] = data[rowMap[i] * nOut + o];
    }
  }
  return out;
}

function activationLayers(activation: string | undefined, name: string): LayerEntry[] {
  switch (activation ?? 'linear') {
    case 'linear':
      return [];
    case 'relu':
      return [{ kind: 'ReLU' }];
    case 'softmax':
      return [{ kind: 'Softmax' }];
    default:
      throw new UnsupportedLayerError(name, `activation '${activation}'`);
  }
}

function inputShapeOf(layers: KerasLayer[]): Shape {
  for (const layer of layers) {
    const dims = layer.config?.batch_input_shape ?? layer.config?.batch_shape;
    if (dims) {
      if (dims.length !== 4) {
        throw new UnsupportedLayerError(layerName(layer, 0),
          `expected 4-d image input, got batch shape [${dims}]`);
      }
      return { h: dims[1], w: dims[2], c: dims[3], flat: false };
    }
  }
  throw new UnsupportedLayerError('input', 'no layer declares batch_input_shape');
}

export function convertModel(model: TfjsModel): Converted {
  const shape = inputShapeOf(model.layers);
  const inputShape = [shape.c, shape.h, shape.w];
  const layers: LayerEntry[] = [];
  const tensors: TensorOut[] = [];
  let preFlatten: { h: number; w: number; c: number } | undefined;
  let state: Shape = { ...shape };

  model.layers.forEach((layer, index) => {
    const name = layerName(layer, index);
    const cfg = layer.config ?? {};
    switch (layer.class_name) {
      case 'InputLayer':
        return;
      case 'Conv2D': {
        requireNoBias(layer, name);
        if (state.flat) {
          throw new UnsupportedLayerError(name, 'Conv2D after Flatten');
        }
        if ((cfg.data_format ?? 'channels_last') !== 'channels_last') {
          throw new UnsupportedLayerError(name, `data_format ${cfg.data_format}`);
        }
        const [kh, kw] = asPair(cfg.kernel_size);
        const [sh, sw] = asPair(cfg.strides ?? 1);
        if (sh !== sw) {
          throw new UnsupportedLayerError(name, `anisotropic stride [${sh}, ${sw}]`);
        }
        let pad: number;
        if (cfg.padding === 'same') {
          if (kh % 2 === 0 || kw % 2 === 0 || sh !== 1) {
            throw new UnsupportedLayerError(name,
              "'same' padding requires odd kernels and stride 1");
          }
          pad = (kh - 1) / 2;
        } else if ((cfg.padding ?? 'valid') === 'valid') {
          pad = 0;
        } else {
          throw new UnsupportedLayerError(name, `padding '${cfg.padding}'`);
        }
        const cout = cfg.filters as number;
        const kernel = weightFor(model, name, 'kernel', [kh, kw, state.c, cout]);
        const ref = `${name}.w.bwt`;
        tensors.push({
          fileName: ref,
          dtype: 'F32',
          dims: [cout, state.c, kh, kw],
          data: permuteConvKernel(kernel.data, kh, kw, state.c, cout),
        });
        layers.push({
          kind: 'Conv', name, in_channels: state.c, out_channels: cout,
          kernel: [kh, kw], stride: sh, pad, weight_ref: ref,
        });
        state = {
          h: Math.floor((state.h + 2 * pad - kh) / sh) + 1,
          w: Math.floor((state.w + 2 * pad - kw) / sw) + 1,
          c: cout,
          flat: false,
        };
        layers.push(...activationLayers(cfg.activation, name));
        return;
      }
      case 'Dense': {
        requireNoBias(layer, name);
        const nIn = state.flat ? state.c : state.h * state.w * state.c;
        const nOut = cfg.units as number;
        const kernel = weightFor(model, name, 'kernel', [nIn, nOut]);
        const ref = `${name}.w.bwt`;
        tensors.push({
          fileName: ref,
          dtype: 'F32',
          dims: [nOut, nIn],
          data: permuteDenseKernel(kernel.data, nIn, nOut, preFlatten),
        });
        layers.push({
          kind: 'FullyConnected', name, in_features: nIn, out_features: nOut,
          weight_ref: ref,
        });
        preFlatten = undefined;
        state = { h: 1, w: 1, c: nOut, flat: true };
        layers.push(...activationLayers(cfg.activation, name));
        return;
      }
      case 'BatchNormalization': {
        if (state.flat) {
          throw new UnsupportedLayerError(name, 'BatchNorm after Flatten');
        }
        const c = state.c;
        const parts = ['gamma', 'beta', 'moving_mean', 'moving_variance'].map(
          (suffix) => weightFor(model, name, suffix, [c]).data);
        const stats = new Float32Array(4 * c);
        parts.forEach((part, row) => stats.set(part, row * c));
        const ref = `${name}.bwt`;
        tensors.push({ fileName: ref, dtype: 'F32', dims: [4, c], data: stats });
        layers.push({ kind: 'BatchNorm', name, channels: c, stats_ref: ref });
        return;
      }
      case 'MaxPooling2D': {
        if (state.flat) {
          throw new UnsupportedLayerError(name, 'MaxPooling2D after Flatten');
        }
        const [ph, pw] = asPair(cfg.pool_size ?? 2);
        const [sh, sw] = asPair(cfg.strides ?? cfg.pool_size ?? 2);
        if (ph !== pw || sh !== ph || sw !== pw) {
          throw new UnsupportedLayerError(name,
            `pool ${ph}x${pw} stride ${sh}x${sw}; only square pools with matching stride`);
        }
        if (state.h % ph !== 0 || state.w % pw !== 0) {
          throw new UnsupportedLayerError(name,
            `pool ${ph} does not divide feature map ${state.h}x${state.w}`);
        }
        layers.push({ kind: 'MaxPool', pool: ph, stride: ph });
        state = { h: state.h / ph, w: state.w / pw, c: state.c, flat: false };
        return;
      }
      case 'Flatten': {
        preFlatten = { h: state.h, w: state.w, c: state.c };
        state = { h: 1, w: 1, c: state.h * state.w * state.c, flat: true };
        return;
      }
      case 'Activation':
        layers.push(...activationLayers(cfg.activation, name));
        return;
      case 'ReLU':
        layers.push({ kind: 'ReLU' });
        return;
      case 'Softmax':
        layers.push({ kind: 'Softmax' });
        return;
      default:
        throw new UnsupportedLayerError(name, `layer class ${layer.class_name}`);
    }
  });

  return { inputShape, layers, tensors };
}
