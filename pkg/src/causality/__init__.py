# 解耦分片训练桌面实现 - 因果记录与回放模块
from src.causality.vector_clock import VectorClock, vclock_merge, combine, SYNCER_ID
from src.causality.tape import (
    EVENT_KINDS, TapeEvent, TapeHeader, Tape, TapeRecorder, record, read_tape, write_tape, tape_bytes,
)
