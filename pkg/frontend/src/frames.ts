/**
 * Wire protocol primitives: 16-byte little-endian frame headers plus
 * payloads of whole elements, at most MAX_PAYLOAD bytes. Full frames
 * are multiples of the 64-byte beat; only a column's final frame may
 * be a partial beat.
 */

export const FRAME_HEADER_SIZE = 16;
export const MAX_PAYLOAD = 65536;
export const BEAT_BYTES = 64;
export const SCHEMA_COLUMN = 0xffff;

export enum FrameType {
  Data = 1,
  Config = 2,
  End = 3,
  Error = 4,
  Ack = 5,
}

export interface FrameHeader {
  frameType: FrameType;
  slotId: number;
  columnIndex: number;
  payloadLen: number;
  sequence: bigint;
}

export interface Frame {
  header: FrameHeader;
  payload: Buffer;
}

export class ProtocolError extends Error {
  constructor(message: string, readonly lastSequence: bigint = -1n) {
    super(message);
    this.name = "ProtocolError";
  }
}

export function encodeFrame(
  frameType: FrameType,
  slotId: number,
  columnIndex: number,
  sequence: bigint | number,
  payload: Buffer = Buffer.alloc(0),
): Buffer {
  if (payload.length > MAX_PAYLOAD) {
    throw new ProtocolError(`payload of ${payload.length} bytes exceeds ${MAX_PAYLOAD}`);
  }
  const buf = Buffer.allocUnsafe(FRAME_HEADER_SIZE + payload.length);
  buf.writeUInt8(frameType, 0);
  buf.writeUInt8(slotId, 1);
  buf.writeUInt16LE(columnIndex, 2);
  buf.writeUInt32LE(payload.length, 4);
  buf.writeBigUInt64LE(BigInt(sequence), 8);
  payload.copy(buf, FRAME_HEADER_SIZE);
  return buf;
}

export function decodeHeader(buf: Buffer): FrameHeader {
  if (buf.length < FRAME_HEADER_SIZE) {
    throw new ProtocolError(`header needs ${FRAME_HEADER_SIZE} bytes, got ${buf.length}`);
  }
  const frameType = buf.readUInt8(0);
  if (!(frameType in FrameType)) {
    throw new ProtocolError(`unknown frame type ${frameType}`);
  }
  const header: FrameHeader = {
    frameType,
    slotId: buf.readUInt8(1),
    columnIndex: buf.readUInt16LE(2),
    payloadLen: buf.readUInt32LE(4),
    sequence: buf.readBigUInt64LE(8),
  };
  if (header.payloadLen > MAX_PAYLOAD) {
    throw new ProtocolError(
      `payload length ${header.payloadLen} exceeds ${MAX_PAYLOAD}`,
      header.sequence,
    );
  }
  return header;
}

/** Incremental deframer: feed raw socket chunks, take complete frames. */
export class FrameDecoder {
  private buffer: Buffer = Buffer.alloc(0);

  push(chunk: Buffer): Frame[] {
    this.buffer = this.buffer.length === 0 ? chunk : Buffer.concat([this.buffer, chunk]);
    const frames: Frame[] = [];
    for (;;) {
      if (this.buffer.length < FRAME_HEADER_SIZE) break;
      const header = decodeHeader(this.buffer);
      const total = FRAME_HEADER_SIZE + header.payloadLen;
      if (this.buffer.length < total) break;
      frames.push({
        header,
        payload: this.buffer.subarray(FRAME_HEADER_SIZE, total),
      });
      this.buffer = this.buffer.subarray(total);
    }
    return frames;
  }

  get pendingBytes(): number {
    return this.buffer.length;
  }
}
