#include "avih/manifest.hpp"

#include <filesystem>
#include <fstream>

#include "avih/digest.hpp"
#include "avih/tensor.hpp"

namespace avih::harness {

namespace fs = std::filesystem;

namespace {

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    AVIH_CHECK(static_cast<bool>(in), "cannot open " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    AVIH_CHECK(static_cast<bool>(out), "cannot write " + path);
    out << j.dump(2) << "\n";
}

}  // namespace

Stage::Stage(std::string name, std::string dir) : name_(std::move(name)), dir_(std::move(dir)) {
    fs::create_directories(dir_);
}

void Stage::set_config(const nlohmann::json& config) { config_digest_ = sha256_hex(config.dump()); }

void Stage::add_input_file(const std::string& path) { inputs_[path] = sha256_file_hex(path); }

void Stage::add_input_digest(const std::string& key, const std::string& digest) {
    inputs_[key] = digest;
}

void Stage::add_output_file(const std::string& path) { outputs_.push_back(path); }

bool Stage::up_to_date() const {
    const fs::path marker = fs::path(dir_) / "stage.json";
    if (!fs::exists(marker)) return false;
    nlohmann::json recorded;
    try {
        recorded = read_json_file(marker.string());
    } catch (...) {
        return false;
    }
    if (recorded.value("config_digest", "") != config_digest_) return false;
    if (recorded.value("inputs", nlohmann::json::object()) != inputs_) return false;
    for (const auto& [path, digest] : recorded.value("outputs", nlohmann::json::object()).items()) {
        if (!fs::exists(path)) return false;
        if (sha256_file_hex(path) != digest.get<std::string>()) return false;
    }
    return true;
}

void Stage::commit() {
    nlohmann::json j;
    j["name"] = name_;
    j["config_digest"] = config_digest_;
    j["inputs"] = inputs_;
    nlohmann::json outs = nlohmann::json::object();
    for (const auto& path : outputs_) outs[path] = sha256_file_hex(path);
    j["outputs"] = outs;
    write_json_file((fs::path(dir_) / "stage.json").string(), j);
}

nlohmann::json Stage::record(bool cached, double seconds, nlohmann::json extra) const {
    nlohmann::json j;
    j["name"] = name_;
    j["cached"] = cached;
    j["seconds"] = seconds;
    j["config_digest"] = config_digest_;
    j["inputs"] = inputs_;
    j["outputs"] = recorded_outputs();
    if (!extra.is_null() && !extra.empty()) j["extra"] = std::move(extra);
    return j;
}

nlohmann::json Stage::recorded_outputs() const {
    const fs::path marker = fs::path(dir_) / "stage.json";
    if (!fs::exists(marker)) return nlohmann::json::object();
    try {
        return read_json_file(marker.string()).value("outputs", nlohmann::json::object());
    } catch (...) {
        return nlohmann::json::object();
    }
}

ExperimentManifest::ExperimentManifest(std::string out_dir) : out_dir_(std::move(out_dir)) {
    fs::create_directories(out_dir_);
    j_["tool"] = "avih-toolkit 0.1.0";
    j_["stages"] = nlohmann::json::array();
}

void ExperimentManifest::set_config(const nlohmann::json& snapshot) { j_["config"] = snapshot; }

void ExperimentManifest::add_stage(nlohmann::json stage_record) {
    j_["stages"].push_back(std::move(stage_record));
}

void ExperimentManifest::set_note(const std::string& key, const nlohmann::json& value) {
    j_["notes"][key] = value;
}

std::string ExperimentManifest::path() const {
    return (fs::path(out_dir_) / "manifest.json").string();
}

void ExperimentManifest::save() const { write_json_file(path(), j_); }

nlohmann::json ExperimentManifest::load(const std::string& out_dir) {
    return read_json_file((fs::path(out_dir) / "manifest.json").string());
}

std::vector<std::string> ExperimentManifest::verify(const nlohmann::json& manifest) {
    std::vector<std::string> problems;
    for (const auto& stage : manifest.value("stages", nlohmann::json::array())) {
        for (const auto& [path, digest] :
             stage.value("outputs", nlohmann::json::object()).items()) {
            if (!fs::exists(path)) {
                problems.push_back("missing: " + path);
            } else if (sha256_file_hex(path) != digest.get<std::string>()) {
                problems.push_back("digest mismatch: " + path);
            }
        }
    }
    return problems;
}

}  // namespace avih::harness
