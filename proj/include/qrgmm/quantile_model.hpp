#pragma once

#include "qrgmm/core.hpp"
#include "qrgmm/schema.hpp"

#include <algorithm>
#include <string>

namespace qrgmm {

class QuantileGrid;

// Anything that maps a covariate row to the m-1 grid quantiles.
class QuantileModel {
public:
    virtual ~QuantileModel() = default;

    virtual std::string kind() const = 0;
    virtual const FieldSchema& schema() const = 0;
    virtual int m() const = 0;

    // Raw per-level outputs (may cross).
    virtual Vector raw_quantiles(const Vector& x) const = 0;

    // Monotone rearrangement of raw_quantiles.
    Vector quantiles(const Vector& x) const {
        Vector q = raw_quantiles(x);
        std::sort(q.data(), q.data() + q.size());
        return q;
    }
};

}  // namespace qrgmm
