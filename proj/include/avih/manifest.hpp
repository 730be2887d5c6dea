#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace avih::harness {

// Content-digest based stage caching. A stage is up to date when its recorded
// config digest, input digests and output digests all match the filesystem;
// timestamps are never consulted.
class Stage {
public:
    Stage(std::string name, std::string dir);

    const std::string& name() const { return name_; }
    const std::string& dir() const { return dir_; }

    void set_config(const nlohmann::json& config);
    void add_input_file(const std::string& path);
    void add_input_digest(const std::string& key, const std::string& digest);
    void add_output_file(const std::string& path);

    // Compares the recorded stage.json against current inputs and outputs.
    bool up_to_date() const;
    // Writes stage.json with input/output digests.
    void commit();
    // Record of this stage for the experiment manifest.
    nlohmann::json record(bool cached, double seconds, nlohmann::json extra = {}) const;
    // Output digests recorded on disk (for cached stages).
    nlohmann::json recorded_outputs() const;

private:
    std::string name_, dir_;
    std::string config_digest_;
    nlohmann::json inputs_ = nlohmann::json::object();
    std::vector<std::string> outputs_;
};

class ExperimentManifest {
public:
    explicit ExperimentManifest(std::string out_dir);

    void set_config(const nlohmann::json& snapshot);
    void add_stage(nlohmann::json stage_record);
    void set_note(const std::string& key, const nlohmann::json& value);

    const nlohmann::json& json() const { return j_; }
    std::string path() const;
    void save() const;

    static nlohmann::json load(const std::string& out_dir);
    // Recomputes output digests; returns mismatch descriptions (empty = ok).
    static std::vector<std::string> verify(const nlohmann::json& manifest);

private:
    std::string out_dir_;
    nlohmann::json j_;
};

}  // namespace avih::harness
