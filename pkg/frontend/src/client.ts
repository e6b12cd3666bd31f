/**
 * Training-side client for the preprocessing service.
 *
 * The client is a pure protocol adapter: it frames a columnar file for
 * the wire, sends CONFIG + data frames, and yields back exactly the
 * bytes the server produced. Nothing is transformed locally.
 *
 * Session protocol:
 *   -> CONFIG (pipeline description text)
 *   <- ACK, or ERROR ("BUSY: ..." when no slot is free)
 *   -> schema frame, DATA frames per column, END
 *   <- schema frame, DATA frames per column, END (or ERROR)
 */

import * as net from "node:net";
import {
  Frame,
  FrameDecoder,
  FrameType,
  ProtocolError,
  SCHEMA_COLUMN,
  encodeFrame,
} from "./frames.js";
import { fileChunks } from "./colfile.js";

export { ProtocolError } from "./frames.js";

const BUSY_PREFIX = "BUSY: ";
// stop reading ahead when this many frames wait for the consumer
const READ_HIGH_WATER = 64;

/** All service slots are occupied; safe to retry later. */
export class ServerBusyError extends Error {
  readonly retryable = true;

  constructor(message: string) {
    super(message);
    this.name = "ServerBusyError";
  }
}

/** The server reported a failure (carries its row/column attribution). */
export class RemoteProcessingError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "RemoteProcessingError";
  }
}

export type SessionState = "open" | "streaming" | "done";

interface Waiter {
  resolve: (frame: Frame | null) => void;
  reject: (err: Error) => void;
}

export class ClientSession {
  private decoder = new FrameDecoder();
  private frames: Frame[] = [];
  private waiters: Waiter[] = [];
  private failure: Error | null = null;
  private eof = false;
  private sequence = 0n;
  private lastReceived = -1n;
  state: SessionState = "open";

  private constructor(private socket: net.Socket) {
    socket.on("data", (chunk: Buffer) => this.onData(chunk));
    socket.on("error", (err: Error) =>
      this.fail(
        new ProtocolError(
          `connection failed mid-stream after frame ${this.lastReceived}: ${err.message}`,
          this.lastReceived,
        ),
      ));
    socket.on("close", () => this.onClose());
  }

  static connect(host: string, port: number): Promise<ClientSession> {
    return new Promise((resolve, reject) => {
      const socket = net.createConnection({ host, port });
      socket.once("connect", () => {
        socket.removeListener("error", reject);
        resolve(new ClientSession(socket));
      });
      socket.once("error", reject);
    });
  }

  private onData(chunk: Buffer): void {
    let frames: Frame[];
    try {
      frames = this.decoder.push(chunk);
    } catch (err) {
      this.fail(err as Error);
      return;
    }
    for (const frame of frames) {
      this.lastReceived = frame.header.sequence;
      const waiter = this.waiters.shift();
      if (waiter) waiter.resolve(frame);
      else this.frames.push(frame);
    }
    if (this.frames.length > READ_HIGH_WATER) this.socket.pause();
  }

  private onClose(): void {
    this.eof = true;
    for (const waiter of this.waiters.splice(0)) waiter.resolve(null);
  }

  private fail(err: Error): void {
    if (!this.failure) this.failure = err;
    for (const waiter of this.waiters.splice(0)) waiter.reject(err);
  }

  private nextFrame(): Promise<Frame | null> {
    if (this.frames.length > 0) {
      const frame = this.frames.shift()!;
      if (this.frames.length <= READ_HIGH_WATER / 2) this.socket.resume();
      return Promise.resolve(frame);
    }
    if (this.failure) return Promise.reject(this.failure);
    if (this.eof) return Promise.resolve(null);
    return new Promise((resolve, reject) => {
      this.waiters.push({ resolve, reject });
    });
  }

  private raiseRemote(frame: Frame): never {
    const message = frame.payload.toString("utf8");
    if (message.startsWith(BUSY_PREFIX)) throw new ServerBusyError(message);
    throw new RemoteProcessingError(message);
  }

  private async write(buf: Buffer): Promise<void> {
    if (!this.socket.write(buf)) {
      await new Promise<void>((resolve) => this.socket.once("drain", resolve));
    }
  }

  /** CONFIG handshake; throws ServerBusyError when no slot is free. */
  async configure(pipelineText: string): Promise<void> {
    await this.write(
      encodeFrame(FrameType.Config, 0, 0, this.sequence++, Buffer.from(pipelineText, "utf8")),
    );
    const reply = await this.nextFrame();
    if (reply === null) {
      throw new ProtocolError("connection closed during CONFIG handshake", this.lastReceived);
    }
    if (reply.header.frameType === FrameType.Error) this.raiseRemote(reply);
    if (reply.header.frameType !== FrameType.Ack) {
      throw new ProtocolError(
        `expected ACK after CONFIG, got frame type ${reply.header.frameType}`,
        reply.header.sequence,
      );
    }
  }

  private async sendFileImage(image: Buffer): Promise<void> {
    await this.write(
      encodeFrame(FrameType.Data, 0, SCHEMA_COLUMN, this.sequence++, image.subarray(0, 24)),
    );
    for (const chunk of fileChunks(image)) {
      await this.write(
        encodeFrame(FrameType.Data, 0, chunk.columnIndex, this.sequence++, chunk.payload),
      );
    }
    await this.write(encodeFrame(FrameType.End, 0, 0, this.sequence++));
  }

  /**
   * Send a columnar file image; yield the server's frames in order up
   * to and including END. Any byte yielded came from a DATA frame.
   */
  async *stream(image: Buffer): AsyncGenerator<Frame> {
    this.state = "streaming";
    const sending = this.sendFileImage(image);
    sending.catch(() => undefined); // surfaced via the read side below
    for (;;) {
      const frame = await this.nextFrame();
      if (frame === null) {
        throw new ProtocolError(
          `server closed the connection mid-stream after frame ${this.lastReceived}`,
          this.lastReceived,
        );
      }
      if (frame.header.frameType === FrameType.Error) this.raiseRemote(frame);
      yield frame;
      if (frame.header.frameType === FrameType.End) break;
    }
    await sending;
    this.state = "done";
  }

  close(): void {
    this.state = "done";
    this.socket.destroy();
  }
}

export interface Endpoint {
  host: string;
  port: number;
}

/**
 * One-shot remote preprocessing: yields the processed column chunks
 * (DATA frames, schema first) as they stream back.
 */
export async function* preprocessRemote(
  endpoint: Endpoint,
  pipelineText: string,
  image: Buffer,
): AsyncGenerator<Frame> {
  const session = await ClientSession.connect(endpoint.host, endpoint.port);
  try {
    await session.configure(pipelineText);
    for await (const frame of session.stream(image)) {
      if (frame.header.frameType === FrameType.Data) yield frame;
    }
  } finally {
    session.close();
  }
}

/**
 * Convenience wrapper: run the pipeline remotely and reassemble the
 * processed stream into a columnar file image (byte-exact).
 */
export async function preprocessRemoteToFileImage(
  endpoint: Endpoint,
  pipelineText: string,
  image: Buffer,
): Promise<Buffer> {
  const parts: Buffer[] = [];
  for await (const frame of preprocessRemote(endpoint, pipelineText, image)) {
    parts.push(frame.payload);
  }
  return Buffer.concat(parts);
}
