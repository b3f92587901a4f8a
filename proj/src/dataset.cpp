#include "oattn/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "oattn/errors.hpp"
#include "oattn/image_io.hpp"

namespace fs = std::filesystem;

namespace oattn {

std::map<std::string, LandmarkMap> read_landmark_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open landmark file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed landmark file '" + path + "': " + e.what());
    }
    if (!j.is_object()) throw DataError("landmark file must be a JSON object: " + path);
    std::map<std::string, LandmarkMap> out;
    for (const auto& [name, entry] : j.items()) {
        LandmarkMap lm;
        if (!entry.is_object())
            throw DataError("landmark entry for '" + name + "' must be an object");
        for (const auto& [comp, pos] : entry.items()) {
            if (!pos.is_array() || pos.size() != 2)
                throw DataError("landmark '" + comp + "' of '" + name + "' must be [row, col]");
            lm[comp] = {pos[0].get<int>(), pos[1].get<int>()};
        }
        out[name] = std::move(lm);
    }
    return out;
}

void write_landmark_file(const std::map<std::string, LandmarkMap>& landmarks,
                         const std::string& path) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, lm] : landmarks) {
        nlohmann::json entry = nlohmann::json::object();
        for (const auto& [comp, pos] : lm) entry[comp] = {pos.first, pos.second};
        j[name] = std::move(entry);
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write landmark file: " + path);
    f << j.dump(2) << "\n";
}

std::vector<std::string> list_pngs_sorted(const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png") names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
}

template <typename T>
Dataset<T> load_dataset(const std::string& dir, const std::map<std::string, LandmarkMap>& landmarks,
                        int side, bool require_landmarks, std::vector<std::string>* notices) {
    Dataset<T> ds;
    for (const std::string& name : list_pngs_sorted(dir)) {
        if (require_landmarks && !landmarks.count(name)) {
            if (notices) notices->push_back("dropping '" + name + "': no landmarks");
            continue;
        }
        ds.names.push_back(name);
        ds.images.push_back(load_image<T>((fs::path(dir) / name).string(), side, notices));
        auto it = landmarks.find(name);
        ds.landmarks.push_back(it == landmarks.end() ? LandmarkMap{} : it->second);
    }
    if (ds.images.empty()) throw DataError("no usable images in " + dir);
    return ds;
}

std::vector<Mask> load_mask_pool(const std::string& dir, int side) {
    std::vector<Mask> pool;
    for (const std::string& name : list_pngs_sorted(dir))
        pool.push_back(load_mask_png((fs::path(dir) / name).string(), side));
    if (pool.empty()) throw DataError("no mask files in " + dir);
    return pool;
}

template Dataset<float> load_dataset<float>(const std::string&, const std::map<std::string, LandmarkMap>&,
                                            int, bool, std::vector<std::string>*);
template Dataset<double> load_dataset<double>(const std::string&, const std::map<std::string, LandmarkMap>&,
                                              int, bool, std::vector<std::string>*);

}  // namespace oattn
