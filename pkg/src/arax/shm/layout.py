"""Binary layout of the shared arena.

Everything inside the segment is addressed by byte offsets from the arena
base so the client and server processes interpret it identically.  All
integers are little-endian.

Segment header (32 bytes, fixed):

    bytes  0-3   magic 0x41524158 ("ARAX")
    bytes  4-5   version (u16)
    bytes  6-7   reserved
    bytes  8-15  total_size (u64)
    bytes 16-23  allocator_root (u64 offset)
    bytes 24-31  queue_directory_root (u64 offset)
"""

import struct

MAGIC = 0x41524158
VERSION = 1

HEADER = struct.Struct("<IHHQQQ")
HEADER_SIZE = HEADER.size  # 32

# ---------------------------------------------------------------- allocator
# Allocator metadata block (at allocator_root):
#   u64 bump_cursor, u64 bump_end, u64 live_bytes, u64 live_count,
#   u64 op_epoch, then NUM_CLASSES u64 free-list heads (offset of first free
#   block, 0 = empty).
#
# Blocks are power-of-two size classes.  Block layout:
#   base+0  : u32 block magic, u8 class index, u8 status, u16 pad
#   payload-8: u64 back-pointer to block base
#   payload  : user bytes (16-aligned; larger alignments padded in)
# Free blocks reuse base+8 as the next-free link.

ALLOC_HDR = struct.Struct("<QQQQQ")
NUM_CLASSES = 32
MIN_CLASS_LOG2 = 6  # 64-byte minimum block
CLASS_HEADS = struct.Struct("<%dQ" % NUM_CLASSES)
ALLOC_META_SIZE = ALLOC_HDR.size + CLASS_HEADS.size

BLOCK_MAGIC = 0xA11C
BLOCK_META = struct.Struct("<HBBHH")  # magic, class, status, pad, pad
BLOCK_HDR_BYTES = 16  # meta word + back-pointer slot
ST_FREE = 0
ST_LIVE = 1

U64 = struct.Struct("<Q")
U32 = struct.Struct("<I")
I32 = struct.Struct("<i")

# ---------------------------------------------------------------- directory
# Directory block (at queue_directory_root):
#   u32 queue_slots, u32 buffer_slots,
#   u64 queue_epoch, u64 buffer_epoch,
#   u64 next_queue_id, u64 next_buffer_id, u64 next_session_id
# followed by queue entries then buffer entries.

DIR_HDR = struct.Struct("<IIQQQQQ")

# queue entry: state, queue_id, session_id, priority, capacity,
#              ring_off, desc_off, desc_stride, reserved
QDIR_ENTRY = struct.Struct("<IIQIIQQII")
QDIR_ENTRY_SIZE = 64
assert QDIR_ENTRY.size <= QDIR_ENTRY_SIZE

QS_FREE = 0
QS_ACTIVE = 1
QS_RELEASING = 2

PRIO_LOW = 0
PRIO_HIGH = 1

# buffer entry: state, pad, buf_id, declared_size
BUF_ENTRY = struct.Struct("<IIQQ")
BUF_ENTRY_SIZE = 32
assert BUF_ENTRY.size <= BUF_ENTRY_SIZE

BS_FREE = 0
BS_LIVE = 1
BS_FREED = 2  # freed by client, awaiting server reap

# --------------------------------------------------------------------- ring
# Ring header (128 bytes): head u64 at +0 (producer-owned), capacity u32 at
# +8, record size u32 at +12, tail u64 at +64 (consumer-owned, separate
# cache line).  Records follow at +128.

RING_HDR_SIZE = 128
RING_HEAD_OFF = 0
RING_META = struct.Struct("<II")  # capacity, record size at +8
RING_TAIL_OFF = 64
RECORD = struct.Struct("<QQ")  # descriptor offset, sequence number
RECORD_SIZE = 64

# --------------------------------------------------------------- descriptor
# Fixed-stride task descriptor slots, one region per queue:
#   +0   u64 seq
#   +8   i32 status   (0 pending, 1 success, <0 error code)
#   +12  u32 kind     (1 compute, 2 transfer-to-device, 3 transfer-from)
#   +16  u32 nargs
#   +20  u32 scalar_len
#   +24  u64 scalar_off   (0 = inline)
#   +32  u64 xfer_buf     (buffer id, transfers only)
#   +40  u64 xfer_staging (arena offset of staging block)
#   +48  u64 xfer_len
#   +56  u64 reserved
#   +64  u32 name_len; name bytes at +68 (max 60)
#   +128 args: MAX_ARGS x (u64 buffer id, u32 direction, u32 pad)
#   +384 inline scalars (max 256 bytes)

DESC_FIXED = struct.Struct("<QiIIIQQQQQ")
DESC_NAME_OFF = 64
DESC_NAME_MAX = 60
DESC_ARGS_OFF = 128
ARG_ENTRY = struct.Struct("<QII")
ARG_ENTRY_SIZE = 16
MAX_ARGS = 16
DESC_INLINE_OFF = DESC_ARGS_OFF + MAX_ARGS * ARG_ENTRY_SIZE  # 384
INLINE_SCALAR_MAX = 256
SCALAR_MAX = 4096
DESC_STRIDE = 768

KIND_COMPUTE = 1
KIND_TO_DEV = 2
KIND_FROM_DEV = 3

DIR_IN = 1
DIR_OUT = 2
DIR_INOUT = 3

# status word values (32-bit: 0 pending, 1 success, negatives are errors)
T_PENDING = 0
T_SUCCESS = 1
T_UNKNOWN_KERNEL = -1
T_DEVICE_OOM = -2
T_ABORTED = -3


def class_for(total: int) -> int:
    """Smallest size-class index whose block covers `total` bytes."""
    idx = MIN_CLASS_LOG2
    while (1 << idx) < total:
        idx += 1
    return idx - MIN_CLASS_LOG2


def class_size(idx: int) -> int:
    return 1 << (idx + MIN_CLASS_LOG2)
