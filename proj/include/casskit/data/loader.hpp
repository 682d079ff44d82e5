#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>

#include "casskit/data/dataset.hpp"
#include "casskit/errors.hpp"

#include <json.hpp>

namespace casskit {

struct LoadError {
    std::string path;
    std::string message;
};

struct LoadResult {
    Dataset dataset;
    std::vector<LoadError> errors;
};

namespace detail {

inline TensorF mat_to_tensor(const cv::Mat& mat) {
    CASSKIT_CHECK(mat.channels() == 1 || mat.channels() == 3, ValidationError,
                  "unsupported channel count: " + std::to_string(mat.channels()));
    cv::Mat m8;
    mat.convertTo(m8, mat.channels() == 1 ? CV_8UC1 : CV_8UC3);
    const std::size_t h = static_cast<std::size_t>(m8.rows);
    const std::size_t w = static_cast<std::size_t>(m8.cols);
    const std::size_t c = static_cast<std::size_t>(m8.channels());
    TensorF out({c, h, w});
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            if (c == 1) {
                out.at3(0, i, j) =
                    static_cast<float>(m8.at<std::uint8_t>(static_cast<int>(i),
                                                           static_cast<int>(j))) /
                    255.0f;
            } else {
                const auto& px = m8.at<cv::Vec3b>(static_cast<int>(i), static_cast<int>(j));
                // OpenCV decodes BGR; store RGB
                out.at3(0, i, j) = static_cast<float>(px[2]) / 255.0f;
                out.at3(1, i, j) = static_cast<float>(px[1]) / 255.0f;
                out.at3(2, i, j) = static_cast<float>(px[0]) / 255.0f;
            }
        }
    return out;
}

inline std::vector<std::string> split_labels(const std::string& field) {
    std::vector<std::string> out;
    std::stringstream ss(field);
    std::string item;
    while (std::getline(ss, item, ';'))
        if (!item.empty()) out.push_back(item);
    return out;
}

} // namespace detail

// Manifest-driven folder ingestion. The manifest is CSV `path,label`,
// one sample per line; multi-label datasets separate labels with
// semicolons. Label names map to indices in sorted order. Files that
// fail to decode land in the error list and the rest of the run
// continues.
inline LoadResult load_image_folder(const std::string& root,
                                    const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    CASSKIT_CHECK(in.good(), ValidationError, "cannot open manifest: " + manifest_path);

    struct Row {
        std::string path;
        std::vector<std::string> labels;
    };
    std::vector<Row> rows;
    std::set<std::string> label_names;
    bool any_multi = false;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        CASSKIT_CHECK(comma != std::string::npos, ValidationError,
                      "manifest line without label: " + line);
        Row row;
        row.path = line.substr(0, comma);
        row.labels = detail::split_labels(line.substr(comma + 1));
        CASSKIT_CHECK(!row.labels.empty(), ValidationError,
                      "manifest line without label: " + line);
        if (row.labels.size() > 1) any_multi = true;
        for (const auto& l : row.labels) label_names.insert(l);
        rows.push_back(std::move(row));
    }
    CASSKIT_CHECK(!rows.empty(), ValidationError, "manifest is empty: " + manifest_path);

    std::map<std::string, int> label_index;
    int next = 0;
    for (const auto& name : label_names) label_index[name] = next++;

    LoadResult result;
    result.dataset.num_classes = label_names.size();
    result.dataset.multi_label = any_multi;
    for (const Row& row : rows) {
        const std::filesystem::path full = std::filesystem::path(root) / row.path;
        cv::Mat mat = cv::imread(full.string(), cv::IMREAD_UNCHANGED);
        if (mat.empty()) {
            result.errors.push_back({row.path, "cannot decode " + full.string()});
            continue;
        }
        LabeledSample sample;
        try {
            sample.image = detail::mat_to_tensor(mat);
        } catch (const ValidationError& e) {
            result.errors.push_back({row.path, e.what()});
            continue;
        }
        sample.id = row.path;
        if (any_multi) {
            sample.multi_label.assign(label_names.size(), 0);
            for (const auto& l : row.labels) sample.multi_label[label_index[l]] = 1;
            sample.label = -1;
        } else {
            sample.label = label_index[row.labels[0]];
        }
        result.dataset.samples.push_back(std::move(sample));
    }
    return result;
}

// External split manifest, JSON {"train": [ids], "val": [ids],
// "test": [ids]}, overriding the 70/10/20 strategy for datasets that
// ship predefined splits. Ids are sample ids; val may be empty.
inline DatasetSplit load_split_manifest(const Dataset& ds, const std::string& path) {
    std::ifstream in(path);
    CASSKIT_CHECK(in.good(), ValidationError, "cannot open split manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("split manifest is not valid JSON: ") + e.what());
    }
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < ds.size(); ++i) by_id[ds.samples[i].id] = i;

    DatasetSplit split;
    split.num_classes = ds.num_classes;
    std::set<std::size_t> seen;
    auto read_list = [&](const char* key, std::vector<std::size_t>& out, bool required) {
        if (!j.contains(key)) {
            CASSKIT_CHECK(!required, ValidationError,
                          std::string("split manifest missing '") + key + "'");
            return;
        }
        for (const auto& id : j.at(key)) {
            const std::string name = id.get<std::string>();
            auto it = by_id.find(name);
            CASSKIT_CHECK(it != by_id.end(), ValidationError,
                          "split manifest references unknown id: " + name);
            CASSKIT_CHECK(seen.insert(it->second).second, ValidationError,
                          "split manifest lists id twice: " + name);
            out.push_back(it->second);
        }
    };
    read_list("train", split.train, true);
    read_list("val", split.val, false);
    read_list("test", split.test, true);
    CASSKIT_CHECK(!split.train.empty() && !split.test.empty(), ValidationError,
                  "split manifest needs nonempty train and test lists");
    return split;
}

} // namespace casskit
