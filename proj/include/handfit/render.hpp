#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <vector>

#include <json.hpp>

#include "handfit/errors.hpp"
#include "handfit/geom.hpp"
#include "handfit/tape.hpp"
#include "handfit/tensor.hpp"

namespace handfit {

// Pinhole camera: p_cam = R * p_world + t, pixel = (fx*x/z + cx, fy*y/z + cy).
struct Camera {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    Mat3 rotation;     // world -> camera
    Vec3 translation;
    int width = 0, height = 0;

    Vec3 to_camera(const Vec3& p) const { return rotation * p + translation; }
};

inline void to_json(nlohmann::json& j, const Camera& c) {
    j["fx"] = c.fx;
    j["fy"] = c.fy;
    j["cx"] = c.cx;
    j["cy"] = c.cy;
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < 3; ++r)
        rows.push_back(std::array<double, 3>{c.rotation(r, 0), c.rotation(r, 1), c.rotation(r, 2)});
    j["R"] = rows;
    j["t"] = std::array<double, 3>{c.translation.x, c.translation.y, c.translation.z};
    j["width"] = c.width;
    j["height"] = c.height;
}

inline void from_json(const nlohmann::json& j, Camera& c) {
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    for (int r = 0; r < 3; ++r)
        for (int k = 0; k < 3; ++k) c.rotation(r, k) = j.at("R")[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)].get<double>();
    c.translation = {j.at("t")[0].get<double>(), j.at("t")[1].get<double>(), j.at("t")[2].get<double>()};
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
}

// Depth image in millimeters; background pixels hold +infinity in memory and
// zero on disk.
class DepthMap {
public:
    DepthMap() = default;
    DepthMap(int width, int height)
        : width_(width), height_(height),
          data_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height),
                std::numeric_limits<double>::infinity()) {}

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t pixel_count() const { return data_.size(); }

    double at(int x, int y) const { return data_[idx(x, y)]; }
    double& at(int x, int y) { return data_[idx(x, y)]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    bool is_foreground(std::size_t i) const { return std::isfinite(data_[i]); }
    bool is_foreground(int x, int y) const { return std::isfinite(at(x, y)); }

    std::size_t foreground_count() const {
        std::size_t n = 0;
        for (double d : data_) n += std::isfinite(d) ? 1 : 0;
        return n;
    }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

private:
    int width_ = 0, height_ = 0;
    std::vector<double> data_;

    std::size_t idx(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }
};

// delta_c: 1 where both maps have a defined depth.
inline std::vector<std::uint8_t> foreground_mask(const DepthMap& rendered, const DepthMap& target) {
    if (rendered.width() != target.width() || rendered.height() != target.height())
        throw ContractError("foreground_mask: " + std::to_string(rendered.width()) + "x" +
                            std::to_string(rendered.height()) + " vs " + std::to_string(target.width()) +
                            "x" + std::to_string(target.height()));
    std::vector<std::uint8_t> mask(rendered.pixel_count());
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask[i] = (rendered.is_foreground(i) && target.is_foreground(i)) ? 1 : 0;
    return mask;
}

namespace detail {

struct ProjectedTri {
    double u[3], v[3], z[3];
    double area = 0;   // canonical (positive) orientation
    double sign = 1;   // orientation flip applied to raw edge functions
    bool valid = false;
};

inline ProjectedTri project_triangle(const double* verts, const std::array<int, 3>& face,
                                     const Camera& cam) {
    ProjectedTri p;
    for (int k = 0; k < 3; ++k) {
        const double* w = verts + 3 * face[static_cast<std::size_t>(k)];
        const Vec3 c = cam.to_camera({w[0], w[1], w[2]});
        if (c.z <= 1e-9) return p;  // behind the camera; no clipping plane handling
        p.u[k] = cam.fx * c.x / c.z + cam.cx;
        p.v[k] = cam.fy * c.y / c.z + cam.cy;
        p.z[k] = c.z;
    }
    const double raw = (p.u[1] - p.u[0]) * (p.v[2] - p.v[0]) - (p.u[2] - p.u[0]) * (p.v[1] - p.v[0]);
    if (raw == 0) return p;
    p.sign = raw > 0 ? 1.0 : -1.0;
    p.area = raw * p.sign;
    p.valid = true;
    return p;
}

// Tie rule for pixels exactly on an edge: accept top and left edges only.
// Screen coordinates have v growing downward.
inline bool edge_is_top_left(double du, double dv) { return (dv == 0 && du < 0) || dv < 0; }

}  // namespace detail

struct RasterResult {
    DepthMap depth;
    std::vector<int> face_of_pixel;  // -1 for background
};

// Z-buffered rasterization at pixel centers (x+0.5, y+0.5) with
// perspective-correct interpolation of camera-space depth.
inline RasterResult rasterize_depth(const Tensor& world_vertices,
                                    const std::vector<std::array<int, 3>>& faces, const Camera& cam) {
    RasterResult out;
    out.depth = DepthMap(cam.width, cam.height);
    out.face_of_pixel.assign(out.depth.pixel_count(), -1);

    const double* verts = world_vertices.data().data();
    for (std::size_t f = 0; f < faces.size(); ++f) {
        const detail::ProjectedTri p = detail::project_triangle(verts, faces[f], cam);
        if (!p.valid) continue;

        int x0 = static_cast<int>(std::floor(std::min({p.u[0], p.u[1], p.u[2]}) - 0.5));
        int x1 = static_cast<int>(std::ceil(std::max({p.u[0], p.u[1], p.u[2]}) - 0.5));
        int y0 = static_cast<int>(std::floor(std::min({p.v[0], p.v[1], p.v[2]}) - 0.5));
        int y1 = static_cast<int>(std::ceil(std::max({p.v[0], p.v[1], p.v[2]}) - 0.5));
        x0 = std::max(x0, 0);
        y0 = std::max(y0, 0);
        x1 = std::min(x1, cam.width - 1);
        y1 = std::min(y1, cam.height - 1);

        for (int y = y0; y <= y1; ++y) {
            const double py = y + 0.5;
            for (int x = x0; x <= x1; ++x) {
                const double px = x + 0.5;
                const double w0 = p.sign * ((p.u[1] - px) * (p.v[2] - py) - (p.u[2] - px) * (p.v[1] - py));
                const double w1 = p.sign * ((p.u[2] - px) * (p.v[0] - py) - (p.u[0] - px) * (p.v[2] - py));
                const double w2 = p.sign * ((p.u[0] - px) * (p.v[1] - py) - (p.u[1] - px) * (p.v[0] - py));
                bool inside = true;
                const double ws[3] = {w0, w1, w2};
                for (int e = 0; e < 3 && inside; ++e) {
                    if (ws[e] > 0) continue;
                    if (ws[e] < 0) {
                        inside = false;
                        break;
                    }
                    // on the edge opposite vertex e, spanned by the other two
                    const int a = (e + 1) % 3, b = (e + 2) % 3;
                    const double du = p.sign * (p.u[b] - p.u[a]);
                    const double dv = p.sign * (p.v[b] - p.v[a]);
                    inside = detail::edge_is_top_left(du, dv);
                }
                if (!inside) continue;

                const double denom = w0 / p.z[0] + w1 / p.z[1] + w2 / p.z[2];
                if (denom <= 0) continue;
                const double depth = (w0 + w1 + w2) / denom;
                double& slot = out.depth.at(x, y);
                if (depth < slot) {
                    slot = depth;
                    out.face_of_pixel[static_cast<std::size_t>(y) * static_cast<std::size_t>(cam.width) +
                                      static_cast<std::size_t>(x)] = static_cast<int>(f);
                }
            }
        }
    }
    return out;
}

// Differentiable depth render. The returned node holds the depth image as a
// flat [H*W] tensor with zeros at background pixels. Each foreground pixel is
// differentiable w.r.t. the three vertices of its covering triangle, with the
// triangle assignment frozen for the pass. If out_map is given it receives the
// +inf-background DepthMap.
inline diff::Value render_depth(diff::Tape& t, diff::Value world_vertices,
                                std::shared_ptr<const std::vector<std::array<int, 3>>> faces,
                                const Camera& cam, DepthMap* out_map = nullptr,
                                std::vector<int>* out_faces = nullptr) {
    RasterResult raster = rasterize_depth(t.value(world_vertices), *faces, cam);

    Tensor img = Tensor::zeros({raster.depth.pixel_count()});
    for (std::size_t i = 0; i < raster.depth.pixel_count(); ++i)
        img[i] = raster.depth.is_foreground(i) ? raster.depth[i] : 0.0;
    if (out_map) *out_map = raster.depth;
    if (out_faces) *out_faces = raster.face_of_pixel;

    const int iv = world_vertices.id;
    auto face_of_pixel = std::make_shared<const std::vector<int>>(std::move(raster.face_of_pixel));

    return t.custom(
        std::move(img), {world_vertices}, "render_depth",
        [iv, faces, cam, face_of_pixel](diff::Tape& tp, const Tensor& g) {
            const Tensor& world = tp.value(diff::Value{&tp, iv});
            Tensor gx = Tensor::zeros(world.shape());
            const double* verts = world.data().data();
            const Mat3 rt = cam.rotation.transposed();

            for (std::size_t pix = 0; pix < face_of_pixel->size(); ++pix) {
                const int f = (*face_of_pixel)[pix];
                if (f < 0 || g[pix] == 0.0) continue;
                const auto& face = (*faces)[static_cast<std::size_t>(f)];
                const detail::ProjectedTri p = detail::project_triangle(verts, face, cam);
                if (!p.valid) continue;

                const double px = static_cast<double>(pix % static_cast<std::size_t>(cam.width)) + 0.5;
                const double py = static_cast<double>(pix / static_cast<std::size_t>(cam.width)) + 0.5;
                const double w[3] = {
                    p.sign * ((p.u[1] - px) * (p.v[2] - py) - (p.u[2] - px) * (p.v[1] - py)),
                    p.sign * ((p.u[2] - px) * (p.v[0] - py) - (p.u[0] - px) * (p.v[2] - py)),
                    p.sign * ((p.u[0] - px) * (p.v[1] - py) - (p.u[1] - px) * (p.v[0] - py))};
                const double A = w[0] + w[1] + w[2];
                const double B = w[0] / p.z[0] + w[1] / p.z[1] + w[2] / p.z[2];
                if (B == 0) continue;
                const double D = A / B;

                // d depth / d w_i and d depth / d z_i
                double dD_dw[3], dD_dz[3];
                for (int i = 0; i < 3; ++i) {
                    dD_dw[i] = (1.0 - D / p.z[i]) / B;
                    dD_dz[i] = D * w[i] / (B * p.z[i] * p.z[i]);
                }

                // d depth / d (u_i, v_i) through the edge functions: w_i
                // involves the other two projected vertices
                double dD_du[3] = {0, 0, 0}, dD_dv[3] = {0, 0, 0};
                for (int i = 0; i < 3; ++i) {
                    const int j = (i + 1) % 3, k = (i + 2) % 3;
                    // w_i = sign * [(u_j-px)(v_k-py) - (u_k-px)(v_j-py)]
                    dD_du[j] += dD_dw[i] * p.sign * (p.v[k] - py);
                    dD_dv[k] += dD_dw[i] * p.sign * (p.u[j] - px);
                    dD_du[k] -= dD_dw[i] * p.sign * (p.v[j] - py);
                    dD_dv[j] -= dD_dw[i] * p.sign * (p.u[k] - px);
                }

                const double gpix = g[pix];
                for (int i = 0; i < 3; ++i) {
                    const int vi = face[static_cast<std::size_t>(i)];
                    const double* wv = verts + 3 * vi;
                    const Vec3 c = cam.to_camera({wv[0], wv[1], wv[2]});
                    // chain through the projection to camera coordinates
                    const Vec3 gc{
                        dD_du[i] * cam.fx / c.z,
                        dD_dv[i] * cam.fy / c.z,
                        dD_dz[i] - dD_du[i] * cam.fx * c.x / (c.z * c.z) -
                            dD_dv[i] * cam.fy * c.y / (c.z * c.z)};
                    const Vec3 gw = rt * gc;
                    gx[static_cast<std::size_t>(3 * vi + 0)] += gpix * gw.x;
                    gx[static_cast<std::size_t>(3 * vi + 1)] += gpix * gw.y;
                    gx[static_cast<std::size_t>(3 * vi + 2)] += gpix * gw.z;
                }
            }
            tp.accumulate(iv, gx);
        });
}

// ---- PFM ------------------------------------------------------------------------
//
// Grayscale little-endian PFM ("Pf", scale -1.0), rows bottom-up per the
// format. Background is stored as 0.

inline void write_pfm(const std::filesystem::path& path, const DepthMap& map) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out << "Pf\n" << map.width() << " " << map.height() << "\n-1.0\n";
    std::vector<float> row(static_cast<std::size_t>(map.width()));
    for (int y = map.height() - 1; y >= 0; --y) {
        for (int x = 0; x < map.width(); ++x)
            row[static_cast<std::size_t>(x)] = map.is_foreground(x, y) ? static_cast<float>(map.at(x, y)) : 0.0f;
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
}

inline DepthMap read_pfm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::string magic;
    in >> magic;
    if (magic == "PF") throw FormatError(path.filename().string() + ": color PFM not supported (grayscale only)");
    if (magic != "Pf") throw FormatError(path.filename().string() + ": not a PFM file (magic '" + magic + "')");
    int w = 0, h = 0;
    double scale = 0;
    in >> w >> h >> scale;
    if (!in || w <= 0 || h <= 0) throw FormatError(path.filename().string() + ": malformed PFM header");
    if (scale >= 0) throw FormatError(path.filename().string() + ": big-endian PFM not supported");
    in.get();  // single whitespace after the header

    DepthMap map(w, h);
    std::vector<float> row(static_cast<std::size_t>(w));
    for (int y = h - 1; y >= 0; --y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(float)));
        if (!in) throw FormatError(path.filename().string() + ": truncated PFM data");
        for (int x = 0; x < w; ++x)
            map.at(x, y) = row[static_cast<std::size_t>(x)] == 0.0f
                               ? std::numeric_limits<double>::infinity()
                               : static_cast<double>(row[static_cast<std::size_t>(x)]);
    }
    return map;
}

inline void save_cameras(const std::filesystem::path& path, const std::vector<Camera>& cams) {
    nlohmann::json j = cams;
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out << j.dump(1) << "\n";
}

inline std::vector<Camera> load_cameras(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
        return j.get<std::vector<Camera>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.filename().string() + ": " + e.what());
    }
}

}  // namespace handfit
