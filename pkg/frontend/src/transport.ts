/** TCP transport for the bridge protocol over node:net.
 *
 * Reads are line-framed and decoupled from rendering: only the newest state
 * frame is retained for the consumer. Writes made while disconnected are
 * buffered for up to one second, then dropped with a warning callback.
 */

import * as net from "node:net";
import {
  ClientMessage,
  ServerFrame,
  parseServerFrame,
  serializeClientMessage,
} from "./protocol.js";

export const DISCONNECT_BUFFER_MS = 1000;

export interface TransportEvents {
  onFrame?: (frame: ServerFrame) => void;
  onWarning?: (message: string) => void;
  onClose?: () => void;
}

interface PendingMessage {
  line: string;
  queuedAt: number;
}

export class BridgeTransport {
  private socket: net.Socket | null = null;
  private readBuffer = "";
  private pending: PendingMessage[] = [];
  private latest: ServerFrame | null = null;
  readonly events: TransportEvents;
  private readonly clock: () => number;

  constructor(events: TransportEvents = {}, clock: () => number = Date.now) {
    this.events = events;
    this.clock = clock;
  }

  get connected(): boolean {
    return this.socket !== null && !this.socket.destroyed;
  }

  /** Newest state/error frame received; the frame buffer holds only this. */
  get latestFrame(): ServerFrame | null {
    return this.latest;
  }

  connect(host: string, port: number): Promise<void> {
    return new Promise((resolve, reject) => {
      const socket = net.createConnection({ host, port }, () => {
        this.socket = socket;
        this.flushPending();
        resolve();
      });
      socket.setEncoding("utf-8");
      socket.on("data", (chunk: string) => this.onData(chunk));
      socket.on("error", (err) => {
        if (this.socket === null) reject(err);
        else this.events.onWarning?.(`socket error: ${err.message}`);
      });
      socket.on("close", () => {
        this.socket = null;
        this.events.onClose?.();
      });
    });
  }

  close(): void {
    this.socket?.destroy();
    this.socket = null;
  }

  /** Send a client message, or buffer it briefly while disconnected. */
  send(msg: ClientMessage): void {
    const line = serializeClientMessage(msg);
    if (this.connected && this.socket) {
      this.socket.write(line + "\n");
      return;
    }
    this.prunePending();
    this.pending.push({ line, queuedAt: this.clock() });
  }

  /** Drop buffered messages older than the disconnect window. */
  prunePending(): number {
    const cutoff = this.clock() - DISCONNECT_BUFFER_MS;
    const before = this.pending.length;
    this.pending = this.pending.filter((p) => p.queuedAt >= cutoff);
    const dropped = before - this.pending.length;
    if (dropped > 0) {
      this.events.onWarning?.(`dropped ${dropped} stale message(s) while disconnected`);
    }
    return dropped;
  }

  get pendingCount(): number {
    return this.pending.length;
  }

  private flushPending(): void {
    this.prunePending();
    for (const p of this.pending) {
      this.socket?.write(p.line + "\n");
    }
    this.pending = [];
  }

  private onData(chunk: string): void {
    this.readBuffer += chunk;
    let index: number;
    while ((index = this.readBuffer.indexOf("\n")) >= 0) {
      const line = this.readBuffer.slice(0, index);
      this.readBuffer = this.readBuffer.slice(index + 1);
      if (!line.trim()) continue;
      try {
        const frame = parseServerFrame(line);
        this.latest = frame;
        this.events.onFrame?.(frame);
      } catch (err) {
        this.events.onWarning?.(`bad frame: ${(err as Error).message}`);
      }
    }
  }
}
