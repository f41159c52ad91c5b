/**
 * Reader for TensorFlow.js layers-model artifacts (model.json + weight
 * shards). Only the subset of Keras layers the target runtime executes is
 * accepted; anything else fails fast, before any output is written.
 */

import * as fs from 'fs';
import * as path from 'path';

export interface WeightSpec {
  name: string;
  shape: number[];
  dtype: string;
}

export interface WeightsManifestGroup {
  paths: string[];
  weights: WeightSpec[];
}

export interface KerasLayer {
  class_name: string;
  config: Record<string, any>;
}

export interface TfjsModel {
  layers: KerasLayer[];
  weights: Map<string, { shape: number[]; data: Float32Array }>;
}

export class UnsupportedLayerError extends Error {
  constructor(layerName: string, reason: string) {
    super(`unsupported layer '${layerName}': ${reason}`);
    this.name = 'UnsupportedLayerError';
  }
}

export class ModelFormatError extends Error {
  constructor(message: string) {
    super(message);
    this.name = 'ModelFormatError';
  }
}

function readWeightShards(modelDir: string, groups: WeightsManifestGroup[]):
    Map<string, { shape: number[]; data: Float32Array }> {
  const out = new Map<string, { shape: number[]; data: Float32Array }>();
  for (const group of groups) {
    const buffers = group.paths.map((p) => {
      const shardPath = path.join(modelDir, p);
      if (!fs.existsSync(shardPath)) {
        throw new ModelFormatError(`weight shard not found: ${shardPath}`);
      }
      return fs.readFileSync(shardPath);
    });
    const blob = Buffer.concat(buffers);
    let offset = 0;
    for (const spec of group.weights) {
      if (spec.dtype !== 'float32') {
        throw new ModelFormatError(`weight ${spec.name} has dtype ${spec.dtype}, expected float32`);
      }
      const count = spec.shape.reduce((a, b) => a * b, 1);
      const bytes = 4 * count;
      if (offset + bytes > blob.length) {
        throw new ModelFormatError(`weight shard truncated while reading ${spec.name}`);
      }
      const data = new Float32Array(count);
      for (let i = 0; i < count; i++) {
        data[i] = blob.readFloatLE(offset + 4 * i);
      }
      out.set(spec.name, { shape: spec.shape, data });
      offset += bytes;
    }
    if (offset !== blob.length) {
      throw new ModelFormatError(
        `weight shard has ${blob.length} bytes, manifest consumes ${offset}`);
    }
  }
  return out;
}

export function loadTfjsModel(modelJsonPath: string): TfjsModel {
  if (!fs.existsSync(modelJsonPath)) {
    throw new ModelFormatError(`model file not found: ${modelJsonPath}`);
  }
  let doc: any;
  try {
    doc = JSON.parse(fs.readFileSync(modelJsonPath, 'utf-8'));
  } catch (err) {
    throw new ModelFormatError(`not valid JSON: ${modelJsonPath} (${(err as Error).message})`);
  }
  const topology = doc.modelTopology;
  const modelConfig = topology?.model_config ?? topology;
  if (!modelConfig?.config?.layers) {
    throw new ModelFormatError('modelTopology.model_config.config.layers missing');
  }
  if (modelConfig.class_name && modelConfig.class_name !== 'Sequential') {
    throw new ModelFormatError(
      `only Sequential models are supported, got ${modelConfig.class_name}`);
  }
  if (!Array.isArray(doc.weightsManifest)) {
    throw new ModelFormatError('weightsManifest missing');
  }
  const weights = readWeightShards(path.dirname(modelJsonPath), doc.weightsManifest);
  return { layers: modelConfig.config.layers as KerasLayer[], weights };
}

export function weightFor(model: TfjsModel, layerName: string, suffix: string,
                          expectShape?: number[]): { shape: number[]; data: Float32Array } {
  const key = `${layerName}/${suffix}`;
  const entry = model.weights.get(key);
  if (!entry) {
    throw new ModelFormatError(`weight ${key} not found in weights manifest`);
  }
  if (expectShape && (entry.shape.length !== expectShape.length ||
      entry.shape.some((d, i) => d !== expectShape[i]))) {
    throw new ModelFormatError(
      `weight ${key} has shape [${entry.shape}], expected [${expectShape}]`);
  }
  return entry;
}
