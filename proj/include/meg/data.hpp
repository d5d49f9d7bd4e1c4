#pragma once

#include <optional>
#include <string>
#include <vector>

#include "meg/encoder.hpp"
#include "meg/rng.hpp"

namespace meg {

// One manifest row. clip_dir is relative to the manifest's directory unless
// absolute. onset/apex/offset are 1-based positions in the clip's numeric
// frame ordering; apex may be absent (SMIC-style corpora).
struct ManifestRow {
    std::string subject_id;
    std::string clip_dir;
    int onset = 1;
    std::optional<int> apex;
    int offset = 1;
    std::string label;
    int label_id = -1;
};

struct DatasetManifest {
    std::vector<ManifestRow> rows;
    std::vector<std::string> class_names; // sorted unique labels
    std::string root;                     // directory containing the manifest
};

// CSV with header `subject,clip_dir,onset,apex,offset,label`. Errors carry
// 1-based row numbers. Duplicate clip_dirs produce a stderr warning only.
DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& m, const std::string& path);

// Frames onset..offset (inclusive) of one clip directory, in numeric
// filename order. All frames must be 8-bit PNGs of one size.
std::vector<ImageU8> read_clip_frames(const std::string& clip_dir, int onset,
                                      int offset);

// Full clip load: slices frames, scales to [0,1] and re-indexes the apex
// relative to onset.
FrameSequence load_clip(const std::string& clip_dir, int onset, int offset,
                        std::optional<int> apex = std::nullopt);
FrameSequence load_clip(const DatasetManifest& m, const ManifestRow& row);

// Per-channel histogram equalization via CDF mapping; constant channels are
// left unchanged.
ImageU8 hist_equalize(const ImageU8& im);

// Bilinear resample, half-pixel centers (corner-aligned false).
ImageU8 resize_bilinear(const ImageU8& im, int out_h, int out_w);

// ---------------------------------------------------------------------------
// Synthetic micro-motion dataset
// ---------------------------------------------------------------------------

struct SynthSpec {
    int num_subjects = 10;
    int clips_per_subject = 6;
    int num_classes = 3; // up to 5 motion archetypes
    int min_frames = 12;
    int max_frames = 20;
    int image_size = 112;
    double motion_amplitude = 2.0; // peak displacement, pixels
    double noise_sigma = 1.2;      // additive gaussian noise, 8-bit levels
    uint64_t seed = 7;

    void validate() const;
};

struct SynthResult {
    std::string manifest_path;        // apex annotated
    std::string manifest_noapex_path; // apex column empty
    std::string meta_path;
    std::vector<std::string> class_names;
    int clip_count = 0;
};

// Triangular motion envelope: rises from the first frame to 1 at the apex,
// falls to 0 at the last frame.
std::vector<double> motion_envelope(int total_frames, int apex);

// Names of the built-in motion archetypes, in class-id order.
std::vector<std::string> synth_class_names(int num_classes);

// Writes one directory of zero-padded frame PNGs per clip, per-class motion
// region masks under masks/, both manifest variants and a meta JSON echoing
// the effective spec. Byte-identical output for identical specs.
SynthResult generate_synthetic(const SynthSpec& spec, const std::string& out_root);

} // namespace meg
