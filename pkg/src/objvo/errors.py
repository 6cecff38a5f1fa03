"""Exception types shared across the package."""


class ObjvoError(Exception):
    """Base class for all errors raised by this package."""


class TooFewPoints(ObjvoError):
    """Ellipse fitting needs at least five contour points."""


class DegenerateFit(ObjvoError):
    """The fitted conic is not a real ellipse (e.g. collinear input)."""


class NotPositiveDefinite(ObjvoError):
    """A matrix expected to be SPD is not."""


class NotAnEllipsoid(ObjvoError):
    """A dual quadric does not decompose as a real ellipsoid."""


class BehindCamera(ObjvoError):
    """The projected entity lies behind the camera."""


class DegenerateConic(ObjvoError):
    """A projected dual conic does not represent an ellipse."""


class DuplicateId(ObjvoError):
    """An entity with this id already exists in the map."""


class UnknownKeyFrame(ObjvoError):
    """The requested keyframe id is not in the map."""


class TooFewMatches(ObjvoError):
    """Pose optimization needs at least six point matches."""


class TooFewViews(ObjvoError):
    """Ellipsoid estimation needs at least three observations."""


class DegenerateBaseline(ObjvoError):
    """No observation pair has enough viewing-ray separation."""


class NoOverlap(ObjvoError):
    """Two trajectories share no timestamps within the pairing window."""


class InvalidSpec(ObjvoError):
    """A scene specification violates its own constraints."""
