"""Vehicle localization in highway tunnels from LIDAR-detected tunnel facilities."""

from .geometry import GeoOrigin, Pose2D, geo_to_local, local_to_geo, wrap_angle
from .tunnel import FacilityKind, LandmarkMap, LaneDistMap, TunnelSpec, build_maps, place_facilities

__all__ = [
    "FacilityKind",
    "GeoOrigin",
    "LandmarkMap",
    "LaneDistMap",
    "Pose2D",
    "TunnelSpec",
    "build_maps",
    "geo_to_local",
    "local_to_geo",
    "place_facilities",
    "wrap_angle",
]
