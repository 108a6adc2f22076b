"""Config-driven sensor kit: scanning range units, cameras, and
navigation sensors with per-sensor periods, runtime enable/disable, and
an auto-generated static transform tree.
"""
from .camera import (
    CameraModel,
    Image,
    actor_color,
    camera_frame,
    decode_image,
    encode_image,
)
from .config import (
    BadParam,
    DuplicateFrame,
    DuplicateTopic,
    SensorConfigError,
    SensorKind,
    SensorMount,
    SensorTypeDef,
    UnknownMount,
    UnknownType,
    load_sensor_config,
    packaged_config_paths,
    packaged_light_types_path,
    parse_mounts,
    parse_types,
)
from .kit import (
    SensorKit,
    TransformEdge,
    TransformTree,
    TF_STATIC_TOPIC,
    build_sensor_kit,
    camera_info_topic,
    set_sensor_enabled,
    static_transforms,
)
from .lidar import (
    LidarModel,
    PointCloud,
    POINT_STRIDE,
    decode_pointcloud,
    encode_pointcloud,
    lidar_scan,
)
from .nav import (
    GnssSampler,
    GRAVITY,
    ImuSampler,
    OdometrySampler,
    enu_to_wgs84,
    nav_sample,
)
from .rays import (
    BadScanPattern,
    RayGrid,
    build_grid_rays,
    grid_columns,
    load_scan_pattern,
    sector_assignment,
    sector_count,
)

__all__ = [
    "BadParam",
    "BadScanPattern",
    "CameraModel",
    "DuplicateFrame",
    "DuplicateTopic",
    "GRAVITY",
    "GnssSampler",
    "Image",
    "ImuSampler",
    "LidarModel",
    "OdometrySampler",
    "POINT_STRIDE",
    "PointCloud",
    "RayGrid",
    "SensorConfigError",
    "SensorKind",
    "SensorKit",
    "SensorMount",
    "SensorTypeDef",
    "TF_STATIC_TOPIC",
    "TransformEdge",
    "TransformTree",
    "UnknownMount",
    "UnknownType",
    "actor_color",
    "build_grid_rays",
    "build_sensor_kit",
    "camera_frame",
    "camera_info_topic",
    "decode_image",
    "decode_pointcloud",
    "encode_image",
    "encode_pointcloud",
    "enu_to_wgs84",
    "grid_columns",
    "lidar_scan",
    "load_scan_pattern",
    "load_sensor_config",
    "nav_sample",
    "packaged_config_paths",
    "packaged_light_types_path",
    "parse_mounts",
    "parse_types",
    "sector_assignment",
    "sector_count",
    "set_sensor_enabled",
    "static_transforms",
]
