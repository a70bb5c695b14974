"""Operator bridge: a line-delimited-JSON TCP server exposing live sim state
and accepting takeover, virtual-marker, and hand-curl commands.

Server → client: ``state`` frames at the policy rate (20 Hz).
Client → server: ``intervene_toggle``, ``marker_delta``, ``hand_pose``.
Single operator; malformed messages get an ``error`` frame and the session
continues; a slow client drops state frames but never commands.
"""

from __future__ import annotations

import json
import queue
import socket
import threading

import numpy as np

from . import retargeting, teleop
from .env import DeskEnv, ScriptedExpert
from .geometry import Pose, compose

__all__ = [
    "PROTOCOL_VERSION",
    "CLIENT_MESSAGE_TYPES",
    "BridgeError",
    "validate_client_message",
    "state_frame",
    "BridgeSource",
    "BridgeServer",
    "serve_ui",
]

PROTOCOL_VERSION = 1
CLIENT_MESSAGE_TYPES = ("intervene_toggle", "marker_delta", "hand_pose")
_STATE_DIV = teleop.BASE_RATE_HZ // teleop.POLICY_RATE_HZ
_MARKER_DELTA_FIELDS = ("dx", "dy", "dz", "droll", "dpitch", "dyaw")


class BridgeError(ValueError):
    """Client message rejected (unknown type or bad payload)."""


def validate_client_message(msg: dict) -> dict:
    """Checks type and payload shape; unknown fields are ignored."""
    if not isinstance(msg, dict) or "type" not in msg:
        raise BridgeError("message must be an object with a 'type' field")
    mtype = msg["type"]
    if mtype not in CLIENT_MESSAGE_TYPES:
        raise BridgeError(f"unknown message type {mtype!r}")
    if mtype == "marker_delta":
        for k in _MARKER_DELTA_FIELDS:
            v = msg.get(k, 0.0)
            if not isinstance(v, (int, float)):
                raise BridgeError(f"marker_delta field {k} must be numeric")
    if mtype == "hand_pose":
        curls = msg.get("curls")
        if (not isinstance(curls, list) or len(curls) != 5
                or not all(isinstance(c, (int, float)) for c in curls)):
            raise BridgeError("hand_pose requires 'curls': 5 numbers")
    return msg


def state_frame(t: float, i_t: int, plant: DeskEnv) -> dict:
    s = plant.state
    return {
        "type": "state",
        "v": PROTOCOL_VERSION,
        "t": round(t, 6),
        "tick": s.tick,
        "i_t": int(i_t),
        "mode": "intervening" if i_t else "autonomous",
        "task_id": plant.spec.task_id,
        "q_arm": np.asarray(s.q_arm).round(6).tolist(),
        "hand_act": np.asarray(s.hand_act).round(6).tolist(),
        "ee": np.asarray(plant.ee_pose().translation).round(6).tolist(),
        "fingertips": np.asarray(plant.fingertips()).round(6).tolist(),
        "object": np.asarray(s.object_pos).round(6).tolist(),
        "object_size": plant.spec.object_size,
        "extraction": round(float(s.extraction), 6),
        "pinched": bool(s.pinched),
        "grasped": bool(s.grasped),
        "outcome": s.outcome,
    }


class BridgeSource:
    """Teleop source driven by client messages.

    Marker deltas accumulate into a virtual marker-cube pose; hand curls map
    through the synthetic human-hand model and the retargeting network, so
    the browser exercises the same keypoint path as a glove would.
    """

    def __init__(self, retarget_fn, send_fn=None):
        self.retarget_fn = retarget_fn
        self._send = send_fn or (lambda frame: None)
        self.commands: "queue.Queue[dict]" = queue.Queue()
        self.intervene = False
        self.marker_pose = Pose.identity()
        self.curls = np.zeros(5)
        self._plant = None
        self._last_state_tick = -1

    # -- client side ---------------------------------------------------------

    def handle_message(self, msg: dict) -> None:
        self.commands.put(validate_client_message(msg))

    def _drain(self) -> None:
        while True:
            try:
                msg = self.commands.get_nowait()
            except queue.Empty:
                return
            if msg["type"] == "intervene_toggle":
                self.intervene = not self.intervene
            elif msg["type"] == "marker_delta":
                d = [float(msg.get(k, 0.0)) for k in _MARKER_DELTA_FIELDS]
                step = compose(
                    Pose.from_axis_angle((0, 0, 1), d[5], (0.0, 0.0, 0.0)),
                    Pose.from_axis_angle((0, 1, 0), d[4], (0.0, 0.0, 0.0)),
                    Pose.from_axis_angle((1, 0, 0), d[3], (d[0], d[1], d[2])),
                )
                self.marker_pose = compose(self.marker_pose, step)
            elif msg["type"] == "hand_pose":
                self.curls = np.clip(np.asarray(msg["curls"], dtype=float), 0.0, 1.0)

    # -- teleop source protocol ------------------------------------------------

    def wants_intervention(self, t: float, plant) -> bool:
        self._drain()
        self._plant = plant
        tick = int(round(t * teleop.BASE_RATE_HZ))
        if tick % _STATE_DIV == 0 and tick != self._last_state_tick:
            self._last_state_tick = tick
            self._send(state_frame(t, int(self.intervene), plant))
        return self.intervene

    def marker(self, t: float, anchor):
        return teleop.MarkerFrame(t, self.marker_pose)

    def hand_command(self, t: float):
        sample = retargeting.sample_from_params(self.curls, np.zeros(5))
        return self.retarget_fn(sample)


class BridgeServer:
    """Single-client LDJSON socket server around a BridgeSource."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 retarget_fn=None, frame_buffer: int = 8):
        self.retarget_fn = retarget_fn or retargeting.oracle_retarget
        self._frames: "queue.Queue[dict]" = queue.Queue(maxsize=frame_buffer)
        self.source = BridgeSource(self.retarget_fn, send_fn=self._push_frame)
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()
        self._client = None
        self._stop = threading.Event()
        self._threads: list = []
        self.errors_sent = 0
        self.frames_dropped = 0

    def _push_frame(self, frame: dict) -> None:
        try:
            self._frames.put_nowait(frame)
        except queue.Full:  # slow client: drop the oldest state, keep newest
            self.frames_dropped += 1
            try:
                self._frames.get_nowait()
            except queue.Empty:
                pass
            self._frames.put_nowait(frame)

    def start(self) -> None:
        th = threading.Thread(target=self._accept_loop, daemon=True)
        th.start()
        self._threads.append(th)

    def _accept_loop(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            if self._client is not None:
                conn.sendall(_dumps({
                    "type": "error", "v": PROTOCOL_VERSION,
                    "reason": "operator session already active",
                }))
                conn.close()
                continue
            self._client = conn
            for target in (self._reader_loop, self._writer_loop):
                th = threading.Thread(target=target, args=(conn,), daemon=True)
                th.start()
                self._threads.append(th)

    def _reader_loop(self, conn) -> None:
        buf = b""
        conn.settimeout(0.2)
        while not self._stop.is_set():
            try:
                data = conn.recv(4096)
            except socket.timeout:
                continue
            except OSError:
                break
            if not data:
                break
            buf += data
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                if not line.strip():
                    continue
                try:
                    self.source.handle_message(json.loads(line))
                except (json.JSONDecodeError, BridgeError) as exc:
                    self.errors_sent += 1
                    try:
                        conn.sendall(_dumps({
                            "type": "error", "v": PROTOCOL_VERSION,
                            "reason": str(exc),
                        }))
                    except OSError:
                        return

    def _writer_loop(self, conn) -> None:
        while not self._stop.is_set():
            try:
                frame = self._frames.get(timeout=0.2)
            except queue.Empty:
                continue
            try:
                conn.sendall(_dumps(frame))
            except OSError:
                return

    def close(self) -> None:
        self._stop.set()
        for th in self._threads:
            th.join(timeout=1.0)
        if self._client is not None:
            self._client.close()
        self._sock.close()


def _dumps(obj: dict) -> bytes:
    return (json.dumps(obj) + "\n").encode()


def serve_ui(task, policy_fn=None, retarget_fn=None, host: str = "127.0.0.1",
             port: int = 0, duration_s: float = 30.0, seed: int = 0,
             realtime: bool = True, scripted: bool = False,
             ready_cb=None) -> teleop.EpisodeLog:
    """Run one bridged episode; blocks until it ends or duration elapses.

    `scripted=True` replaces the live operator with the scripted expert
    (still emitting state frames), which gives clients a deterministic
    loopback target.
    """
    retarget_fn = retarget_fn or retargeting.oracle_retarget
    env = DeskEnv(task, seed=seed)
    policy_fn = policy_fn or (lambda obs: np.tile(
        np.concatenate([env.q_arm, env.state.hand_act]), (8, 1)))
    server = BridgeServer(host=host, port=port, retarget_fn=retarget_fn)
    source = server.source
    if scripted:
        expert = ScriptedExpert(env, retarget_fn, mode="drive")
        send = source._send

        class _ScriptedBridge:
            def wants_intervention(self, t, plant):
                source._drain()  # keep rejecting/acking client traffic
                tick = int(round(t * teleop.BASE_RATE_HZ))
                if tick % _STATE_DIV == 0 and tick != source._last_state_tick:
                    source._last_state_tick = tick
                    send(state_frame(t, 1, plant))
                return True

            def marker(self, t, anchor):
                return expert.marker(t, anchor)

            def hand_command(self, t):
                return expert.hand_command(t)

        run_source = _ScriptedBridge()
    else:
        run_source = source
    server.start()
    if ready_cb is not None:
        ready_cb(server)
    try:
        log = teleop.run_scheduler(policy_fn, run_source, env,
                                   duration_s=duration_s, realtime=realtime)
    finally:
        server.close()
    return log
