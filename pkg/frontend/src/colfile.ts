/**
 * The columnar file layout: a 24-byte header followed by raw column
 * payloads, dense float32 columns first, then sparse columns (hex
 * tokens or uint32 values). The client never transforms data; it only
 * needs the layout to cut a file into wire frames and to size the
 * columns it reassembles.
 */

import { BEAT_BYTES, MAX_PAYLOAD } from "./frames.js";

export const FILE_HEADER_SIZE = 24;
export const MAGIC = Buffer.from("MPCOL\x00\x00\x01", "latin1");

export const SPARSE_HEX = 0;
export const SPARSE_U32 = 1;

export interface FileHeader {
  version: number;
  denseCount: number;
  sparseCount: number;
  tokenWidth: number;
  sparseKind: number;
  rowCount: number;
}

export class FileFormatError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "FileFormatError";
  }
}

export function decodeFileHeader(buf: Buffer): FileHeader {
  if (buf.length < FILE_HEADER_SIZE) {
    throw new FileFormatError(`file header needs ${FILE_HEADER_SIZE} bytes`);
  }
  if (!buf.subarray(0, 8).equals(MAGIC)) {
    throw new FileFormatError(`bad magic ${buf.subarray(0, 8).toString("hex")}`);
  }
  const rows = buf.readBigUInt64LE(16);
  if (rows > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new FileFormatError(`row count ${rows} too large`);
  }
  return {
    version: buf.readUInt16LE(8),
    denseCount: buf.readUInt16LE(10),
    sparseCount: buf.readUInt16LE(12),
    tokenWidth: buf.readUInt8(14),
    sparseKind: buf.readUInt8(15),
    rowCount: Number(rows),
  };
}

export function columnCount(header: FileHeader): number {
  return header.denseCount + header.sparseCount;
}

export function columnByteWidth(header: FileHeader, index: number): number {
  return index < header.denseCount ? 4 : header.tokenWidth;
}

export function columnBytes(header: FileHeader, index: number): number {
  return columnByteWidth(header, index) * header.rowCount;
}

function gcd(a: number, b: number): number {
  while (b !== 0) [a, b] = [b, a % b];
  return a;
}

/** Largest payload <= MAX_PAYLOAD holding whole beats and whole elements. */
export function fullFrameBytes(elementWidth: number): number {
  const group = (BEAT_BYTES * elementWidth) / gcd(BEAT_BYTES, elementWidth);
  return Math.floor(MAX_PAYLOAD / group) * group;
}

export interface ColumnChunk {
  columnIndex: number;
  payload: Buffer;
}

/** Cut a whole column file image into per-column wire payloads. */
export function* fileChunks(image: Buffer): Generator<ColumnChunk> {
  const header = decodeFileHeader(image);
  let offset = FILE_HEADER_SIZE;
  for (let col = 0; col < columnCount(header); col++) {
    const width = columnByteWidth(header, col);
    const total = columnBytes(header, col);
    if (offset + total > image.length) {
      throw new FileFormatError(`column ${col} truncated in file image`);
    }
    const chunkBytes = fullFrameBytes(width);
    for (let done = 0; done < total; done += chunkBytes) {
      const take = Math.min(chunkBytes, total - done);
      yield { columnIndex: col, payload: image.subarray(offset, offset + take) };
      offset += take;
    }
  }
}
