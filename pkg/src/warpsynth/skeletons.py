"""Keypoint schema tables: segment topology, raster channel layout, mirror indices.

Two schemas are registered:
  * ``face68``: the standard 68-point facial landmark layout, rendered into a
    single raster channel.
  * ``body``: a whole-body pose layout (25 body points + 70 face points +
    2x21 hand points = 137), rendered into one channel per limb group so that
    crossing limbs stay distinguishable.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class KeypointSchema:
    name: str
    num_points: int
    # (point_a, point_b, channel) triples; a segment is drawn only when both
    # endpoints are visible.
    segments: tuple
    # raster channel used for the lone-point dot of each landmark
    point_channel: tuple
    num_channels: int
    # flip_index[i] = landmark that lands at slot i after a horizontal mirror
    flip_index: tuple
    # channel permutation under a horizontal mirror (left/right groups swap)
    channel_flip: tuple


def _chain(indices, closed=False):
    indices = list(indices)
    pairs = list(zip(indices[:-1], indices[1:]))
    if closed:
        pairs.append((indices[-1], indices[0]))
    return pairs


def _flip_from_swaps(num_points, swaps):
    flip = list(range(num_points))
    for a, b in swaps:
        flip[a], flip[b] = flip[b], flip[a]
    return flip


def _point_channels(num_points, segments, overrides=None):
    channel = [None] * num_points
    for a, b, ch in segments:
        if channel[a] is None:
            channel[a] = ch
        if channel[b] is None:
            channel[b] = ch
    for idx, ch in (overrides or {}).items():
        channel[idx] = ch
    missing = [i for i, ch in enumerate(channel) if ch is None]
    if missing:
        raise ValueError(f"points without a raster channel: {missing}")
    return channel


# 68-point face layout: jaw, brows, nose bridge, nostril line, eyes, lips.
_FACE68_CHAINS = [
    (range(0, 17), False),   # jaw
    (range(17, 22), False),  # right eyebrow
    (range(22, 27), False),  # left eyebrow
    (range(27, 31), False),  # nose bridge
    (range(31, 36), False),  # nostril line
    (range(36, 42), True),   # right eye
    (range(42, 48), True),   # left eye
    (range(48, 60), True),   # outer lip
    (range(60, 68), True),   # inner lip
]

_FACE68_SWAPS = [
    (0, 16), (1, 15), (2, 14), (3, 13), (4, 12), (5, 11), (6, 10), (7, 9),
    (17, 26), (18, 25), (19, 24), (20, 23), (21, 22),
    (31, 35), (32, 34),
    (36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46),
    (48, 54), (49, 53), (50, 52), (55, 59), (56, 58),
    (60, 64), (61, 63), (65, 67),
]


def _face_segments(offset=0, channel=0):
    segments = []
    for chain, closed in _FACE68_CHAINS:
        for a, b in _chain(chain, closed):
            segments.append((a + offset, b + offset, channel))
    return segments


def _face_swaps(offset=0):
    return [(a + offset, b + offset) for a, b in _FACE68_SWAPS]


FACE68 = KeypointSchema(
    name="face68",
    num_points=68,
    segments=tuple(_face_segments()),
    point_channel=tuple(_point_channels(68, _face_segments())),
    num_channels=1,
    flip_index=tuple(_flip_from_swaps(68, _FACE68_SWAPS)),
    channel_flip=(0,),
)


# Whole-body layout, point order: 25 body + 70 face + 21 left hand + 21 right
# hand. Body point order: 0 nose, 1 neck, 2-4 right arm, 5-7 left arm,
# 8 mid hip, 9-11 right leg, 12-14 left leg, 15/16 eyes, 17/18 ears,
# 19-21 left foot, 22-24 right foot.
_TORSO, _HEAD, _ARM_R, _ARM_L, _LEG_R, _LEG_L, _FACE, _HANDS = range(8)

_BODY_EDGES = [
    (1, 8, _TORSO), (1, 2, _TORSO), (1, 5, _TORSO), (8, 9, _TORSO), (8, 12, _TORSO),
    (1, 0, _HEAD), (0, 15, _HEAD), (15, 17, _HEAD), (0, 16, _HEAD), (16, 18, _HEAD),
    (2, 3, _ARM_R), (3, 4, _ARM_R),
    (5, 6, _ARM_L), (6, 7, _ARM_L),
    (9, 10, _LEG_R), (10, 11, _LEG_R), (11, 22, _LEG_R), (22, 23, _LEG_R), (11, 24, _LEG_R),
    (12, 13, _LEG_L), (13, 14, _LEG_L), (14, 19, _LEG_L), (19, 20, _LEG_L), (14, 21, _LEG_L),
]

_BODY_SWAPS = [
    (2, 5), (3, 6), (4, 7), (9, 12), (10, 13), (11, 14),
    (15, 16), (17, 18), (19, 22), (20, 23), (21, 24),
]

_FACE_OFFSET = 25          # 68 contour points + 2 pupils
_PUPIL_R, _PUPIL_L = 93, 94
_HAND_L_OFFSET, _HAND_R_OFFSET = 95, 116

_HAND_CHAINS = [
    [0, 1, 2, 3, 4], [0, 5, 6, 7, 8], [0, 9, 10, 11, 12],
    [0, 13, 14, 15, 16], [0, 17, 18, 19, 20],
]


def _hand_segments(offset, channel):
    segments = []
    for chain in _HAND_CHAINS:
        for a, b in _chain(chain):
            segments.append((a + offset, b + offset, channel))
    return segments


def _body_schema():
    num_points = 137
    segments = list(_BODY_EDGES)
    segments += _face_segments(offset=_FACE_OFFSET, channel=_FACE)
    segments += _hand_segments(_HAND_L_OFFSET, _HANDS)
    segments += _hand_segments(_HAND_R_OFFSET, _HANDS)

    swaps = list(_BODY_SWAPS)
    swaps += _face_swaps(offset=_FACE_OFFSET)
    swaps.append((_PUPIL_R, _PUPIL_L))
    swaps += [(_HAND_L_OFFSET + i, _HAND_R_OFFSET + i) for i in range(21)]

    point_channel = _point_channels(
        num_points, segments, overrides={_PUPIL_R: _FACE, _PUPIL_L: _FACE}
    )
    return KeypointSchema(
        name="body",
        num_points=num_points,
        segments=tuple(segments),
        point_channel=tuple(point_channel),
        num_channels=8,
        flip_index=tuple(_flip_from_swaps(num_points, swaps)),
        channel_flip=(_TORSO, _HEAD, _ARM_L, _ARM_R, _LEG_L, _LEG_R, _FACE, _HANDS),
    )


BODY = _body_schema()

SCHEMAS = {FACE68.name: FACE68, BODY.name: BODY}

# Landmarks covered by the face, used for face-focused discriminator crops.
FACE_POINT_RANGE = {
    "face68": (0, 68),
    "body": (_FACE_OFFSET, _FACE_OFFSET + 70),
}


def get_schema(name):
    try:
        return SCHEMAS[name]
    except KeyError:
        raise KeyError(f"unknown keypoint schema {name!r}; known: {sorted(SCHEMAS)}") from None
