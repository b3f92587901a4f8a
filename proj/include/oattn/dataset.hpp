#pragma once

#include <map>
#include <string>
#include <vector>

#include "tensor.hpp"
#include "training.hpp"

namespace oattn {

// Landmark file: one JSON object mapping image filename to
// {"left_eye": [row, col], "right_eye": [...], "nose": [...], "mouth": [...]}
// in pixel coordinates of the resized image.
std::map<std::string, LandmarkMap> read_landmark_file(const std::string& path);

void write_landmark_file(const std::map<std::string, LandmarkMap>& landmarks,
                         const std::string& path);

std::vector<std::string> list_pngs_sorted(const std::string& dir);

template <typename T>
struct Dataset {
    std::vector<std::string> names;
    std::vector<Tensor<T>> images;  // [3,S,S] each
    std::vector<LandmarkMap> landmarks;
};

// Loads every png in the directory, resized to `side`. With
// require_landmarks, images absent from the landmark map are dropped with a
// notice; an empty remainder is an error.
template <typename T>
Dataset<T> load_dataset(const std::string& dir, const std::map<std::string, LandmarkMap>& landmarks,
                        int side, bool require_landmarks, std::vector<std::string>* notices = nullptr);

// Loads all masks from a directory of irregular mask files.
std::vector<Mask> load_mask_pool(const std::string& dir, int side);

}  // namespace oattn
