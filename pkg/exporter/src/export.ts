#!/usr/bin/env node
/**
 * Standalone exporter CLI.
 *
 * Usage: bwnet-export --in model.json --out dir/ [--name model]
 *
 * Reads a TensorFlow.js layers model, writes a bwnet manifest plus tensor
 * files plus a sha256 checksum listing. Conversion runs fully in memory;
 * nothing is written if any layer is unsupported. Exit codes: 0 success,
 * 1 validation/conversion error.
 */

import * as crypto from 'crypto';
import * as fs from 'fs';
import * as path from 'path';

import { convertModel, Converted } from './convert';
import { encodeTensor } from './format';
import { loadTfjsModel } from './tfjs';

interface CliArgs {
  input: string;
  outDir: string;
  name: string;
}

export function parseArgs(argv: string[]): CliArgs {
  let input: string | undefined;
  let outDir: string | undefined;
  let name = 'model';
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i];
    const value = argv[i + 1];
    if (value === undefined) {
      throw new Error(`flag ${flag} needs a value`);
    }
    switch (flag) {
      case '--in':
        input = value;
        break;
      case '--out':
        outDir = value;
        break;
      case '--name':
        name = value;
        break;
      default:
        throw new Error(`unknown flag ${flag}`);
    }
  }
  if (!input || !outDir) {
    throw new Error('usage: bwnet-export --in model.json --out dir/ [--name model]');
  }
  return { input, outDir, name };
}

function manifestDocument(name: string, converted: Converted): string {
  const doc = {
    name,
    input_shape: converted.inputShape,
    tensor_dir: 'tensors',
    layers: converted.layers,
  };
  return JSON.stringify(doc, null, 2) + '\n';
}

export function exportModel(input: string, outDir: string, name: string): string {
  const model = loadTfjsModel(input);
  const converted = convertModel(model);

  // encode everything before touching the filesystem
  const files = new Map<string, Buffer>();
  for (const tensor of converted.tensors) {
    files.set(path.join('tensors', tensor.fileName),
              encodeTensor(tensor.dtype, tensor.dims, tensor.data));
  }
  const manifestName = `${name}.manifest`;
  files.set(manifestName, Buffer.from(manifestDocument(name, converted), 'utf-8'));

  const checksumLines = [...files.entries()]
    .sort(([a], [b]) => (a < b ? -1 : 1))
    .map(([rel, buf]) =>
      `${crypto.createHash('sha256').update(buf).digest('hex')}  ${rel}`);
  files.set('checksums.txt', Buffer.from(checksumLines.join('\n') + '\n', 'utf-8'));

  fs.mkdirSync(path.join(outDir, 'tensors'), { recursive: true });
  for (const [rel, buf] of files) {
    fs.writeFileSync(path.join(outDir, rel), buf);
  }
  return path.join(outDir, manifestName);
}

export function main(argv: string[]): number {
  let args: CliArgs;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
  try {
    const manifestPath = exportModel(args.input, args.outDir, args.name);
    console.log(JSON.stringify({ manifest: manifestPath }));
    return 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
