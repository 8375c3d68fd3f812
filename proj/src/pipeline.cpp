#include "rtn/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "rtn/serialize.hpp"

namespace rtn {

Volume make_volume(std::int64_t depth, std::int64_t height, std::int64_t width, float fill) {
    if (depth < 1 || height < 1 || width < 1) {
        throw std::invalid_argument("volume extents must be >= 1");
    }
    Volume v;
    v.depth = depth;
    v.height = height;
    v.width = width;
    v.voxels.assign(static_cast<std::size_t>(depth * height * width), fill);
    return v;
}

std::vector<Coord> centerline_centers(const Centerline& centerline, int n) {
    const auto len = static_cast<std::int64_t>(centerline.points.size());
    if (len < 2) throw std::invalid_argument("centerline must have at least 2 points");
    if (n < 1) throw std::invalid_argument("instance count must be >= 1");
    std::vector<Coord> centers;
    centers.reserve(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
        const std::int64_t idx =
            n == 1 ? std::llround(static_cast<double>(len - 1) / 2.0)
                   : std::llround(static_cast<double>(j) * static_cast<double>(len - 1) /
                                  static_cast<double>(n - 1));
        centers.push_back(centerline.points[static_cast<std::size_t>(idx)]);
    }
    return centers;
}

namespace {

TensorF crop_one_cube(const Volume& volume, const Coord& center, int size) {
    const std::int64_t s = size;
    const std::int64_t z0 = center.z - s / 2;
    const std::int64_t y0 = center.y - s / 2;
    const std::int64_t x0 = center.x - s / 2;
    std::vector<float> data(static_cast<std::size_t>(s * s * s), 0.0f);
    for (std::int64_t lz = 0; lz < s; ++lz) {
        const std::int64_t z = z0 + lz;
        if (z < 0 || z >= volume.depth) continue;
        for (std::int64_t ly = 0; ly < s; ++ly) {
            const std::int64_t y = y0 + ly;
            if (y < 0 || y >= volume.height) continue;
            const std::int64_t xbeg = std::max<std::int64_t>(x0, 0);
            const std::int64_t xend = std::min<std::int64_t>(x0 + s, volume.width);
            if (xbeg >= xend) continue;
            const float* src = volume.voxels.data() + (z * volume.height + y) * volume.width + xbeg;
            float* dst = data.data() + (lz * s + ly) * s + (xbeg - x0);
            std::memcpy(dst, src, sizeof(float) * static_cast<std::size_t>(xend - xbeg));
        }
    }
    return TensorF::from_data({1, s, s, s}, std::move(data));
}

}  // namespace

std::vector<Instance> crop_cubes(const Volume& volume, const Centerline& centerline, int n, int size) {
    if (size < 1) throw std::invalid_argument("cube size must be >= 1");
    for (const auto& p : centerline.points) {
        if (!volume.inside(p)) throw std::invalid_argument("centerline point outside volume");
    }
    const auto centers = centerline_centers(centerline, n);
    std::vector<Instance> instances;
    instances.reserve(centers.size());
    for (int j = 0; j < n; ++j) {
        Instance inst;
        inst.cube = crop_one_cube(volume, centers[static_cast<std::size_t>(j)], size);
        inst.center = centers[static_cast<std::size_t>(j)];
        inst.index_on_centerline = j;
        instances.push_back(std::move(inst));
    }
    return instances;
}

std::vector<Coord> jitter_augment(const std::vector<Coord>& centers, const Volume& volume, Rng& rng) {
    std::vector<Coord> out;
    out.reserve(centers.size());
    for (const Coord& c : centers) {
        const auto mag = static_cast<std::int64_t>(rng.uniform_int(4));
        const auto dir = rng.uniform_int(6);
        Coord j = c;
        switch (dir) {
            case 0: j.z += mag; break;
            case 1: j.z -= mag; break;
            case 2: j.y += mag; break;
            case 3: j.y -= mag; break;
            case 4: j.x += mag; break;
            default: j.x -= mag; break;
        }
        j.z = std::clamp<std::int64_t>(j.z, 0, volume.depth - 1);
        j.y = std::clamp<std::int64_t>(j.y, 0, volume.height - 1);
        j.x = std::clamp<std::int64_t>(j.x, 0, volume.width - 1);
        out.push_back(j);
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

namespace {

enum class SlotRole { informative, background, lowcontrast, mismatched };

// paint a ball of the class texture around one centerline point; max-combine
// so overlapping balls form a solid tube
void paint_tube_ball(Volume& vol, const Coord& c, int texture_label, const SignalPatterns& pat,
                     int stripe_phase, Rng& rng) {
    const double r = pat.tube_radius;
    const auto ir = static_cast<std::int64_t>(std::ceil(r));
    for (std::int64_t dz = -ir; dz <= ir; ++dz)
        for (std::int64_t dy = -ir; dy <= ir; ++dy)
            for (std::int64_t dx = -ir; dx <= ir; ++dx) {
                if (static_cast<double>(dz * dz + dy * dy + dx * dx) > r * r) continue;
                const Coord p{c.z + dz, c.y + dy, c.x + dx};
                if (!vol.inside(p)) continue;
                double intensity;
                if (texture_label == 1) {
                    intensity = pat.smooth_intensity + pat.smooth_speckle * (rng.uniform() * 2.0 - 1.0);
                } else {
                    const auto phase = (p.z + stripe_phase) % pat.artifact_stripe_period;
                    const double base = phase < pat.artifact_stripe_on ? pat.artifact_dropout_intensity
                                                                       : pat.smooth_intensity;
                    intensity = base + pat.artifact_speckle * (rng.uniform() * 2.0 - 1.0);
                }
                float& v = vol.at(p.z, p.y, p.x);
                v = std::max(v, static_cast<float>(intensity));
            }
}

void paint_lowcontrast_ball(Volume& vol, const Coord& c, double noise_level,
                            const SignalPatterns& pat, Rng& rng) {
    const double r = std::max(1.0, pat.tube_radius - 0.5);
    const auto ir = static_cast<std::int64_t>(std::ceil(r));
    for (std::int64_t dz = -ir; dz <= ir; ++dz)
        for (std::int64_t dy = -ir; dy <= ir; ++dy)
            for (std::int64_t dx = -ir; dx <= ir; ++dx) {
                if (static_cast<double>(dz * dz + dy * dy + dx * dx) > r * r) continue;
                const Coord p{c.z + dz, c.y + dy, c.x + dx};
                if (!vol.inside(p)) continue;
                const double intensity =
                    noise_level + pat.lowcontrast_intensity * (0.7 + 0.3 * rng.uniform());
                float& v = vol.at(p.z, p.y, p.x);
                v = std::max(v, static_cast<float>(intensity));
            }
}

void validate_spec(const SyntheticSpec& spec) {
    if (spec.n < 1) throw std::invalid_argument("synthetic spec: n must be >= 1");
    if (spec.cube_size < 1) throw std::invalid_argument("synthetic spec: cube_size must be >= 1");
    if (spec.num_informative < 1 || spec.num_informative > spec.n) {
        throw std::invalid_argument("synthetic spec: need 1 <= num_informative <= n");
    }
    if (spec.num_bags < 1) throw std::invalid_argument("synthetic spec: num_bags must be >= 1");
    if (spec.positive_fraction < 0.0 || spec.positive_fraction > 1.0) {
        throw std::invalid_argument("synthetic spec: positive_fraction must be in [0, 1]");
    }
    if (spec.volume_size < 8) throw std::invalid_argument("synthetic spec: volume_size must be >= 8");
    if (spec.centerline_points < 2) {
        throw std::invalid_argument("synthetic spec: centerline_points must be >= 2");
    }
    if (spec.noise_level < 0.0 || spec.noise_level > 0.5) {
        throw std::invalid_argument("synthetic spec: noise_level must be in [0, 0.5]");
    }
}

}  // namespace

std::vector<GeneratedBag> generate_synthetic_dataset(const SyntheticSpec& spec) {
    validate_spec(spec);
    const int n = spec.n;
    const int ni = spec.num_informative;
    const std::int64_t V = spec.volume_size;
    const int P = spec.centerline_points;

    // label sequence: exact count at the requested ratio, then shuffled
    const int num_pos = static_cast<int>(std::llround(spec.positive_fraction * spec.num_bags));
    std::vector<int> labels(static_cast<std::size_t>(spec.num_bags), 0);
    for (int i = 0; i < num_pos; ++i) labels[static_cast<std::size_t>(i)] = 1;
    Rng label_rng(derive_seed(spec.seed, 0));
    for (int i = spec.num_bags - 1; i > 0; --i) {
        const auto j = label_rng.uniform_int(static_cast<std::uint64_t>(i) + 1);
        std::swap(labels[static_cast<std::size_t>(i)], labels[static_cast<std::size_t>(j)]);
    }

    std::vector<GeneratedBag> out;
    out.reserve(static_cast<std::size_t>(spec.num_bags));
    for (int b = 0; b < spec.num_bags; ++b) {
        Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(b) + 1));
        const int label = labels[static_cast<std::size_t>(b)];

        GeneratedBag gen;
        gen.volume = make_volume(V, V, V);
        for (auto& v : gen.volume.voxels) v = static_cast<float>(rng.uniform() * spec.noise_level);

        // gently curved centerline spanning the z axis
        const double margin = 6.0;
        const double amp_y = 2.0 + 2.0 * rng.uniform();
        const double amp_x = 2.0 + 2.0 * rng.uniform();
        const double freq_y = 0.5 + rng.uniform();
        const double freq_x = 0.5 + rng.uniform();
        const double phase_y = rng.uniform() * 6.283185307179586;
        const double phase_x = rng.uniform() * 6.283185307179586;
        for (int k = 0; k < P; ++k) {
            const double t = static_cast<double>(k) / static_cast<double>(P - 1);
            Coord p;
            p.z = std::llround(margin + t * (static_cast<double>(V) - 1.0 - 2.0 * margin));
            p.y = std::llround(static_cast<double>(V) / 2.0 +
                               amp_y * std::sin(6.283185307179586 * freq_y * t + phase_y));
            p.x = std::llround(static_cast<double>(V) / 2.0 +
                               amp_x * std::sin(6.283185307179586 * freq_x * t + phase_x));
            p.z = std::clamp<std::int64_t>(p.z, 0, V - 1);
            p.y = std::clamp<std::int64_t>(p.y, 1, V - 2);
            p.x = std::clamp<std::int64_t>(p.x, 1, V - 2);
            gen.centerline.points.push_back(p);
        }

        // informative slots form a contiguous, roughly centered block; the
        // remaining slots (vessel ends) get one of the three negative kinds
        int block_start = 0;
        if (ni < n) {
            const int base = (n - ni) / 2;
            const int wobble = static_cast<int>(rng.uniform_int(3)) - 1;
            block_start = std::clamp(base + wobble, 0, n - ni);
        }
        std::vector<SlotRole> roles(static_cast<std::size_t>(n));
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
        for (int j = 0; j < n; ++j) {
            if (j >= block_start && j < block_start + ni) {
                roles[static_cast<std::size_t>(j)] = SlotRole::informative;
                mask[static_cast<std::size_t>(j)] = 1;
            } else {
                // 2:2:1 background/lowcontrast/mismatched; opposite-texture
                // tubes must stay a minority or the bag label is no longer
                // identifiable from an unordered instance set
                switch (rng.uniform_int(5)) {
                    case 0:
                    case 1: roles[static_cast<std::size_t>(j)] = SlotRole::background; break;
                    case 2:
                    case 3: roles[static_cast<std::size_t>(j)] = SlotRole::lowcontrast; break;
                    default: roles[static_cast<std::size_t>(j)] = SlotRole::mismatched; break;
                }
            }
        }

        // partition centerline points among instance slots (nearest slot) and
        // paint each point according to its slot's role
        const int stripe_phase = static_cast<int>(rng.uniform_int(
            static_cast<std::uint64_t>(spec.patterns.artifact_stripe_period)));
        for (int k = 0; k < P; ++k) {
            const int slot =
                n == 1 ? 0
                       : static_cast<int>(std::llround(static_cast<double>(k) *
                                                       static_cast<double>(n - 1) /
                                                       static_cast<double>(P - 1)));
            const Coord& p = gen.centerline.points[static_cast<std::size_t>(k)];
            switch (roles[static_cast<std::size_t>(slot)]) {
                case SlotRole::informative:
                    paint_tube_ball(gen.volume, p, label, spec.patterns, stripe_phase, rng);
                    break;
                case SlotRole::mismatched:
                    paint_tube_ball(gen.volume, p, 1 - label, spec.patterns, stripe_phase, rng);
                    break;
                case SlotRole::lowcontrast:
                    paint_lowcontrast_ball(gen.volume, p, spec.noise_level, spec.patterns, rng);
                    break;
                case SlotRole::background:
                    break;
            }
        }
        for (auto& v : gen.volume.voxels) v = std::clamp(v, 0.0f, 1.0f);

        gen.bag.instances = crop_cubes(gen.volume, gen.centerline, n, spec.cube_size);
        gen.bag.duplicate_centers = has_duplicate_centers(gen.bag.instances);
        gen.bag.label = label;
        std::ostringstream id;
        id << "bag_" << std::setw(4) << std::setfill('0') << b;
        gen.bag.id = id.str();
        gen.bag.informative = std::move(mask);
        out.push_back(std::move(gen));
    }
    return out;
}

std::vector<FoldSplit> kfold_split(int num_bags, int k, std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument("kfold_split: k must be >= 2");
    if (num_bags < k) throw std::invalid_argument("kfold_split: fewer bags than folds");
    std::vector<int> order(static_cast<std::size_t>(num_bags));
    for (int i = 0; i < num_bags; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    for (int i = num_bags - 1; i > 0; --i) {
        const auto j = rng.uniform_int(static_cast<std::uint64_t>(i) + 1);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    const int base = num_bags / k;
    const int rem = num_bags % k;
    std::vector<FoldSplit> folds;
    folds.reserve(static_cast<std::size_t>(k));
    int pos = 0;
    for (int f = 0; f < k; ++f) {
        const int sz = base + (f < rem ? 1 : 0);
        FoldSplit split;
        split.test.assign(order.begin() + pos, order.begin() + pos + sz);
        split.train.reserve(static_cast<std::size_t>(num_bags - sz));
        for (int i = 0; i < num_bags; ++i) {
            if (i < pos || i >= pos + sz) split.train.push_back(order[static_cast<std::size_t>(i)]);
        }
        std::sort(split.test.begin(), split.test.end());
        std::sort(split.train.begin(), split.train.end());
        folds.push_back(std::move(split));
        pos += sz;
    }
    return folds;
}

// ---------------------------------------------------------------------------
// bag archive
// ---------------------------------------------------------------------------

namespace {
constexpr std::uint32_t kBagArchiveVersion = 1;
}

void save_bag_archive(const std::filesystem::path& path, const std::vector<Bag>& bags) {
    for (const auto& bag : bags) {
        if (bag.label != 0 && bag.label != 1) {
            throw std::invalid_argument("bag '" + bag.id + "' has non-binary label");
        }
        if (!bag.informative.empty() && bag.informative.size() != bag.instances.size()) {
            throw std::invalid_argument("bag '" + bag.id + "' has mismatched informative mask");
        }
        if (bag.instances.size() > 65535) {
            throw std::invalid_argument("bag '" + bag.id + "' exceeds the u16 instance count");
        }
    }
    atomic_write_file(path, [&](std::ostream& os) {
        os.write("RTNB", 4);
        io::write_u32_le(os, kBagArchiveVersion);
        io::write_u32_le(os, static_cast<std::uint32_t>(bags.size()));
        for (const auto& bag : bags) {
            io::write_string(os, bag.id);
            io::write_u8(os, static_cast<std::uint8_t>(bag.label));
            const auto n = static_cast<std::uint16_t>(bag.instances.size());
            io::write_u16_le(os, n);
            for (std::uint16_t j = 0; j < n; ++j) {
                const std::uint8_t bit = bag.informative.empty() ? 1 : bag.informative[j];
                io::write_u8(os, bit);
            }
            for (std::uint16_t j = 0; j < n; ++j) {
                write_tensor_record(os, "instance_" + std::to_string(j), bag.instances[j].cube);
            }
        }
    });
}

std::vector<Bag> load_bag_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "RTNB", 4) != 0) {
        throw CorruptFileError(path.string() + ": bad bag-archive magic");
    }
    const std::uint32_t version = io::read_u32_le(is, "bag-archive version");
    if (version != kBagArchiveVersion) {
        throw CorruptFileError(path.string() + ": unsupported bag-archive version " +
                               std::to_string(version));
    }
    const std::uint32_t count = io::read_u32_le(is, "bag count");
    std::vector<Bag> bags;
    bags.reserve(count);
    for (std::uint32_t b = 0; b < count; ++b) {
        Bag bag;
        bag.id = io::read_string(is, "bag id");
        const std::uint8_t label = io::read_u8(is, "bag label");
        if (label > 1) throw CorruptFileError(path.string() + ": bag '" + bag.id + "' has label " + std::to_string(label));
        bag.label = label;
        const std::uint16_t n = io::read_u16_le(is, "instance count");
        bag.informative.resize(n);
        for (std::uint16_t j = 0; j < n; ++j) {
            const std::uint8_t bit = io::read_u8(is, "informative mask");
            if (bit > 1) throw CorruptFileError(path.string() + ": bad informative mask byte");
            bag.informative[j] = bit;
        }
        bag.instances.reserve(n);
        for (std::uint16_t j = 0; j < n; ++j) {
            auto [name, cube] = read_tensor_record<float>(is);
            Instance inst;
            inst.cube = std::move(cube);
            inst.center = Coord{0, 0, 0};
            inst.index_on_centerline = j;
            bag.instances.push_back(std::move(inst));
            (void)name;
        }
        bags.push_back(std::move(bag));
    }
    return bags;
}

bool has_duplicate_centers(const std::vector<Instance>& instances) {
    for (std::size_t i = 0; i < instances.size(); ++i)
        for (std::size_t j = i + 1; j < instances.size(); ++j)
            if (instances[i].center == instances[j].center) return true;
    return false;
}

std::string manifest_line(const Bag& bag) {
    std::ostringstream os;
    os << "id=" << bag.id << " label=" << bag.label << " n=" << bag.instances.size();
    if (bag.duplicate_centers) os << " dup=1";
    return os.str();
}

void save_manifest(const std::filesystem::path& archive_path, const std::vector<Bag>& bags) {
    std::filesystem::path mpath = archive_path;
    mpath += ".manifest";
    atomic_write_file(mpath, [&](std::ostream& os) {
        for (const auto& bag : bags) os << manifest_line(bag) << "\n";
    });
}

}  // namespace rtn
