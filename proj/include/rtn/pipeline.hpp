#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rtn/rng.hpp"
#include "rtn/tensor.hpp"

namespace rtn {

struct Coord {
    std::int64_t z = 0, y = 0, x = 0;
    bool operator==(const Coord&) const = default;
};

// Dense scalar field, row-major (z, y, x), intensities in [0, 1].
struct Volume {
    std::int64_t depth = 0, height = 0, width = 0;
    std::vector<float> voxels;

    float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return voxels[static_cast<std::size_t>((z * height + y) * width + x)];
    }
    float& at(std::int64_t z, std::int64_t y, std::int64_t x) {
        return voxels[static_cast<std::size_t>((z * height + y) * width + x)];
    }
    bool inside(const Coord& c) const {
        return c.z >= 0 && c.z < depth && c.y >= 0 && c.y < height && c.x >= 0 && c.x < width;
    }
};

Volume make_volume(std::int64_t depth, std::int64_t height, std::int64_t width, float fill = 0.0f);

// Ordered (z, y, x) points; every point must lie inside the paired volume.
struct Centerline {
    std::vector<Coord> points;
};

// One 3D cube cropped around a centerline position. C1 = 1 channel.
struct Instance {
    TensorF cube;  // shape {1, s, s, s}
    Coord center;
    int index_on_centerline = 0;
};

// Ordered instance list with a bag-level binary quality label. The
// informative mask marks which instances carry the label signal; all-1 when
// unknown (clinical data would not have it). Short centerlines may sample
// the same center twice; such bags are kept but flagged in the manifest.
struct Bag {
    std::vector<Instance> instances;
    int label = 0;
    std::string id;
    std::vector<std::uint8_t> informative;
    bool duplicate_centers = false;
};

// true when any two instances share a center voxel
bool has_duplicate_centers(const std::vector<Instance>& instances);

// Centers at point indices round(j*(len-1)/(n-1)); cubes span
// [c - size/2, c - size/2 + size) per axis, so the center voxel sits at
// offset size/2. Voxels outside the volume are zero.
std::vector<Instance> crop_cubes(const Volume& volume, const Centerline& centerline, int n, int size);

// The center indices used by crop_cubes, exposed for re-cropping with jitter.
std::vector<Coord> centerline_centers(const Centerline& centerline, int n);

// Per center: displacement magnitude uniform on {0,1,2,3}, direction uniform
// over the 6 axis-aligned unit vectors (draw order: magnitude, then
// direction), result clamped inside the volume.
std::vector<Coord> jitter_augment(const std::vector<Coord>& centers, const Volume& volume, Rng& rng);

// Per-class planted-pattern parameters. Label 1 bags get a smooth bright
// tube; label 0 bags get the same tube corrupted by stripe dropouts and
// speckle. Non-informative instances are background-only, low-contrast blob,
// or a tube textured with the opposite class's pattern.
struct SignalPatterns {
    double tube_radius = 2.5;
    double smooth_intensity = 0.80;
    double smooth_speckle = 0.02;
    double artifact_dropout_intensity = 0.30;
    double artifact_speckle = 0.10;
    int artifact_stripe_period = 5;
    int artifact_stripe_on = 3;  // dropout planes per period
    double lowcontrast_intensity = 0.12;  // above the noise floor
};

struct SyntheticSpec {
    int n = 19;
    int cube_size = 20;
    int num_informative = 19;
    double noise_level = 0.2;
    int num_bags = 210;
    double positive_fraction = 114.0 / 210.0;  // 114 accepted of 210 branches
    int volume_size = 64;
    int centerline_points = 48;
    std::uint64_t seed = 1;
    SignalPatterns patterns;
};

// A generated bag keeps its source volume and centerline so training can
// re-crop with jittered centers; archived bags keep only the cubes.
struct GeneratedBag {
    Bag bag;
    Volume volume;
    Centerline centerline;
};

std::vector<GeneratedBag> generate_synthetic_dataset(const SyntheticSpec& spec);

// Deterministic shuffled k-fold partition over bag indices. Folds differ in
// size by at most one; each index lands in exactly one test fold.
struct FoldSplit {
    std::vector<int> train;
    std::vector<int> test;
};
std::vector<FoldSplit> kfold_split(int num_bags, int k, std::uint64_t seed);

// Bag archive ("RTNB"): cube contents, labels, and informative masks only.
// Center coordinates are not persisted; loaded instances have center {0,0,0}
// and sequential centerline indices.
void save_bag_archive(const std::filesystem::path& path, const std::vector<Bag>& bags);
std::vector<Bag> load_bag_archive(const std::filesystem::path& path);

// `id=<id> label=<0|1> n=<n>`, one line per bag, written next to the archive
// as "<archive>.manifest". Bags with duplicate crop centers get a trailing
// ` dup=1` marker.
std::string manifest_line(const Bag& bag);
void save_manifest(const std::filesystem::path& archive_path, const std::vector<Bag>& bags);

}  // namespace rtn
