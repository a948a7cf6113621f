#pragma once

#include <array>
#include <cstdint>

#include "minereg/autodiff/tensor.hpp"
#include "minereg/errors.hpp"

namespace minereg::ad::detail {

// Channel count plus spatial extents right-aligned into three slots, so a
// 2D image [C, H, W] reads as [C, 1, H, W].
struct SpatialLayout {
    int64_t channels = 0;
    int rank = 0;
    std::array<int64_t, 3> dims{1, 1, 1};

    int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
};

inline SpatialLayout spatial_layout(const Shape &shape, const char *op) {
    if (shape.size() < 2 || shape.size() > 4) {
        throw ConfigError(std::string(op) + ": expected [C, spatial...] with 1-3 spatial axes, got " +
                          shape_str(shape));
    }
    SpatialLayout s;
    s.channels = shape[0];
    s.rank = static_cast<int>(shape.size()) - 1;
    for (int i = 0; i < s.rank; ++i) s.dims[3 - s.rank + i] = shape[1 + i];
    return s;
}

inline Shape spatial_shape(int64_t channels, const SpatialLayout &s) {
    Shape out{channels};
    for (int i = 0; i < s.rank; ++i) out.push_back(s.dims[3 - s.rank + i]);
    return out;
}

} // namespace minereg::ad::detail
