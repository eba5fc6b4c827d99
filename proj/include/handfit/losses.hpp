#pragma once

#include <cmath>
#include <iostream>
#include <sstream>
#include <vector>

#include "handfit/errors.hpp"
#include "handfit/render.hpp"
#include "handfit/tape.hpp"

namespace handfit {

struct LossWeights {
    double lambda_nr = 5.0;
    double lambda_lap = 5.0;
    bool laplacian_squared = false;  // squared-L2 per-vertex reduction instead of L2
};

struct LossBreakdown {
    double pose = 0;
    double depth = 0;
    double penet_rigid = 0;
    double penet_nonrigid = 0;
    double laplacian = 0;
    double total = 0;
    double lambda_nr = 5.0;
    double lambda_lap = 5.0;

    std::string str() const {
        std::ostringstream os;
        os << "pose=" << pose << " depth=" << depth << " penet_r=" << penet_rigid
           << " penet_nr=" << penet_nonrigid << " lap=" << laplacian << " total=" << total;
        return os.str();
    }
};

// Mean per-joint L1 distance: (1/J) * sum_j |p_j - p*_j|_1.
inline diff::Value pose_loss(diff::Tape& t, diff::Value pred, const Tensor& target) {
    const Tensor& p = t.value(pred);
    if (!p.same_shape(target))
        throw ShapeError("pose_loss: " + shape_str(p.shape()) + " vs " + shape_str(target.shape()));
    for (std::size_t i = 0; i < target.numel(); ++i)
        if (!std::isfinite(target[i]))
            throw DataError("pose_loss: non-finite target at index " + std::to_string(i));
    const double inv_j = 1.0 / static_cast<double>(target.rows());
    return t.scale(t.sum(t.abs(t.sub(pred, t.constant(target)))), inv_j);
}

inline double smooth_l1(double x) { return std::fabs(x) < 1.0 ? 0.5 * x * x : std::fabs(x) - 0.5; }

inline diff::Value smooth_l1(diff::Tape& t, diff::Value x) {
    return t.unary(x, "smooth_l1",
                   [](double v) { return std::fabs(v) < 1.0 ? 0.5 * v * v : std::fabs(v) - 0.5; },
                   [](double v) { return std::fabs(v) < 1.0 ? v : (v > 0 ? 1.0 : -1.0); });
}

// One rendered/target view pair for the depth term.
struct DepthViewNodes {
    diff::Value rendered;       // [H*W], zeros at background
    const DepthMap* rendered_map = nullptr;
    const DepthMap* target_map = nullptr;
};

// Mean over views of the masked mean smooth-L1 depth residual. A view whose
// overlap mask is empty contributes zero and is reported on stderr.
inline diff::Value depth_loss(diff::Tape& t, const std::vector<DepthViewNodes>& views) {
    if (views.empty()) throw ContractError("depth_loss: no views");
    diff::Value acc = t.constant_scalar(0.0);
    for (std::size_t c = 0; c < views.size(); ++c) {
        const DepthViewNodes& v = views[c];
        const auto mask = foreground_mask(*v.rendered_map, *v.target_map);
        std::size_t count = 0;
        Tensor mask_t = Tensor::zeros({mask.size()});
        Tensor target_t = Tensor::zeros({mask.size()});
        for (std::size_t i = 0; i < mask.size(); ++i) {
            if (!mask[i]) continue;
            ++count;
            mask_t[i] = 1.0;
            target_t[i] = (*v.target_map)[i];
        }
        if (count == 0) {
            std::cerr << "depth_loss: view " << c << " has an empty overlap mask, contributes 0\n";
            continue;
        }
        if (t.value(v.rendered).numel() != mask.size())
            throw ShapeError("depth_loss: rendered node has " +
                             std::to_string(t.value(v.rendered).numel()) + " pixels, maps have " +
                             std::to_string(mask.size()));
        diff::Value masked = t.mul(t.sub(v.rendered, t.constant(target_t)), t.constant(mask_t));
        diff::Value per_view = t.scale(t.sum(smooth_l1(t, masked)), 1.0 / static_cast<double>(count));
        acc = t.add(acc, per_view);
    }
    return t.scale(acc, 1.0 / static_cast<double>(views.size()));
}

// Mean per-vertex norm of the Laplacian residuals. The raw vector mean would
// cancel to ~0, so the reduction takes a per-vertex L2 norm (or its square).
inline diff::Value laplacian_loss(diff::Tape& t, diff::Value residuals, bool squared = false) {
    const Tensor& r = t.value(residuals);
    if (r.rank() != 2 || r.cols() != 3)
        throw ShapeError("laplacian_loss: residuals " + shape_str(r.shape()) + ", expected [V,3]");
    const double inv_v = 1.0 / static_cast<double>(r.rows());
    diff::Value sq = t.sum_rows(t.mul(residuals, residuals));
    return t.scale(t.sum(squared ? sq : t.sqrt(sq)), inv_v);
}

struct TotalLoss {
    diff::Value total;
    LossBreakdown breakdown;
};

// L = pose + depth + (rigid + lambda_nr * nonrigid) + lambda_lap * laplacian.
inline TotalLoss total_loss(diff::Tape& t, diff::Value pose, diff::Value depth, diff::Value rigid,
                            diff::Value nonrigid, diff::Value laplacian, const LossWeights& w) {
    diff::Value penet = t.add(rigid, t.scale(nonrigid, w.lambda_nr));
    diff::Value total = t.add(t.add(t.add(pose, depth), penet), t.scale(laplacian, w.lambda_lap));

    TotalLoss out;
    out.total = total;
    out.breakdown.pose = t.scalar(pose);
    out.breakdown.depth = t.scalar(depth);
    out.breakdown.penet_rigid = t.scalar(rigid);
    out.breakdown.penet_nonrigid = t.scalar(nonrigid);
    out.breakdown.laplacian = t.scalar(laplacian);
    out.breakdown.total = t.scalar(total);
    out.breakdown.lambda_nr = w.lambda_nr;
    out.breakdown.lambda_lap = w.lambda_lap;
    if (!std::isfinite(out.breakdown.total))
        throw TrainingError("total_loss: non-finite loss (" + out.breakdown.str() + ")");
    return out;
}

}  // namespace handfit
