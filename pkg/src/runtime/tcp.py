"""
TCP 传输
用与进程内通道相同的帧格式在套接字上收发消息，供多进程演示使用
"""
import logging
import socket
import struct
import threading
from typing import Optional, Tuple

from src.core.errors import ChannelClosedError
from src.runtime.messages import Message, decode_frame, encode_frame

logger = logging.getLogger(__name__)

_LENGTH = struct.Struct("<I")


class TcpChannel:
    """
    套接字上的 FIFO 通道

    发送端整帧写入；接收端按 u32 长度前缀从缓冲区切出完整帧后解码。
    """

    def __init__(self, sock: socket.socket, name: str = ""):
        self.sock = sock
        self.name = name
        self._buffer = bytearray()
        self._send_lock = threading.Lock()
        self._closed = False

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "TcpChannel":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock, f"{host}:{port}")

    @classmethod
    def accept(cls, listener: socket.socket) -> "TcpChannel":
        sock, addr = listener.accept()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock, f"{addr[0]}:{addr[1]}")

    @property
    def closed(self) -> bool:
        return self._closed

    def send(self, msg: Message) -> None:
        if self._closed:
            raise ChannelClosedError(f"通道 {self.name} 已关闭")
        frame = encode_frame(msg)
        try:
            with self._send_lock:
                self.sock.sendall(frame)
        except OSError as e:
            self._closed = True
            raise ChannelClosedError(f"通道 {self.name} 发送失败: {e}") from e

    def _take(self) -> Optional[Message]:
        if len(self._buffer) < _LENGTH.size:
            return None
        (length,) = _LENGTH.unpack_from(self._buffer, 0)
        if len(self._buffer) < _LENGTH.size + length:
            return None
        msg, used = decode_frame(bytes(self._buffer[:_LENGTH.size + length]))
        del self._buffer[:used]
        return msg

    def poll(self, timeout: Optional[float] = None) -> Optional[Message]:
        """取一条完整消息，超时返回 None；对端关闭时抛出 ChannelClosedError"""
        msg = self._take()
        if msg is not None:
            return msg
        if self._closed:
            raise ChannelClosedError(f"通道 {self.name} 已关闭")
        self.sock.settimeout(timeout if timeout is None or timeout > 0 else 0.0)
        while True:
            try:
                chunk = self.sock.recv(1 << 16)
            except (socket.timeout, BlockingIOError):
                return None
            except OSError as e:
                self._closed = True
                raise ChannelClosedError(f"通道 {self.name} 接收失败: {e}") from e
            if not chunk:
                self._closed = True
                raise ChannelClosedError(f"通道 {self.name} 对端已关闭")
            self._buffer += chunk
            msg = self._take()
            if msg is not None:
                return msg

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.close()
        except OSError:
            pass


def tcp_pipe(name: str = "") -> Tuple[TcpChannel, TcpChannel]:
    """
    本机套接字对

    Returns:
        (写端, 读端)
    """
    a, b = socket.socketpair()
    return TcpChannel(a, f"{name}/tx"), TcpChannel(b, f"{name}/rx")


def listen(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
    """监听套接字；port=0 时由系统分配"""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen()
    logger.info(f"TCP 监听 {listener.getsockname()}")
    return listener
